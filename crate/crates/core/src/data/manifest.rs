//! Dataset manifests and the synthetic corpus generator.
//!
//! A manifest is UTF-8 TSV with a header row and the columns
//! `path`, `tokens` (space-separated raw symbols), `lang` and `split`.
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::synth::{random_spec, synth_utterance, RecipeBook};
use crate::data::wav::{write_wav, WavEncoding};
use crate::error::{Error, Result};
use crate::objectives::CtcTarget;
use crate::phonemap::{PhonemeInventory, UnknownSymbols};

pub const MANIFEST_HEADER: [&str; 4] = ["path", "tokens", "lang", "split"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub tokens: Vec<String>,
    pub lang: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn audio_path(&self, i: usize) -> PathBuf {
        let p = &self.records[i].path;
        if p.is_absolute() {
            p.clone()
        } else {
            self.root.join(p)
        }
    }

    /// Records in `split`, or all records when `split` is `None`.
    pub fn filter_split(&self, split: Option<&str>) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| split.is_none_or(|s| r.split == s))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Manifest {
            line: 0,
            reason: "empty manifest".into(),
        })?;
        let cols: Vec<&str> = header.1.trim_end_matches('\r').split('\t').collect();
        if cols != MANIFEST_HEADER {
            return Err(Error::Manifest {
                line: header.0 + 1,
                reason: format!("header must be {:?}, got {cols:?}", MANIFEST_HEADER),
            });
        }
        let mut records = Vec::new();
        for (i, raw) in lines {
            let fields: Vec<&str> = raw.trim_end_matches('\r').split('\t').collect();
            let [path, tokens, lang, split] = fields[..] else {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
                });
            };
            if path.is_empty() {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: "empty path".into(),
                });
            }
            records.push(ManifestRecord {
                path: PathBuf::from(path),
                tokens: tokens.split_whitespace().map(str::to_string).collect(),
                lang: lang.to_string(),
                split: split.to_string(),
            });
        }
        Ok(Self {
            records,
            root: root.into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&fs::read_to_string(path)?, root)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = MANIFEST_HEADER.join("\t");
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.tokens.join(" "),
                r.lang,
                r.split
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Map every record's tokens; errors name the manifest line.
    pub fn targets(&self, inv: &PhonemeInventory, mode: UnknownSymbols) -> Result<Vec<CtcTarget>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                inv.map_sequence(&r.tokens, mode)
                    .map(|m| CtcTarget::new(m.class_ids))
                    .map_err(|e| Error::Manifest {
                        line: i + 2,
                        reason: e.to_string(),
                    })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub utterances: usize,
    pub classes: usize,
    pub seed: u64,
    pub phonemes_mean: f64,
    pub phonemes_std: f64,
    pub duration_mean_ms: f64,
    pub duration_std_ms: f64,
    /// Trailing utterances labelled `eval` instead of `train`.
    pub eval_utterances: usize,
    pub lang: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            utterances: 50,
            classes: 8,
            seed: 0,
            phonemes_mean: 6.3,
            phonemes_std: 1.45,
            duration_mean_ms: 80.0,
            duration_std_ms: 15.0,
            eval_utterances: 0,
            lang: "synth".into(),
        }
    }
}

/// Class sequences with near-uniform coverage: classes are dealt from
/// shuffled decks of every class, skipping a card equal to the previous one
/// when another is available.
fn deal_sequences(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let count = Normal::new(cfg.phonemes_mean, cfg.phonemes_std.max(1e-9)).expect("finite phoneme stats");
    let mut deck: Vec<usize> = Vec::new();
    (0..cfg.utterances)
        .map(|_| {
            let n = (count.sample(rng).round() as i64).max(1) as usize;
            let mut seq: Vec<usize> = Vec::with_capacity(n);
            while seq.len() < n {
                if deck.is_empty() {
                    deck = (0..cfg.classes).collect();
                    deck.shuffle(rng);
                }
                let pos = deck
                    .iter()
                    .rposition(|&c| Some(&c) != seq.last())
                    .unwrap_or(deck.len() - 1);
                seq.push(deck.remove(pos));
            }
            seq
        })
        .collect()
}

/// Write `utterances` synthetic WAVs under `dir/audio`, a manifest at
/// `dir/manifest.tsv` and the inventory of the first `classes` symbols of
/// `inv`, which label the phonemes, at `dir/inventory.tsv`.
pub fn make_dataset(dir: &Path, cfg: &DatasetConfig, inv: &PhonemeInventory) -> Result<Manifest> {
    if cfg.classes == 0 || cfg.classes > inv.num_classes() {
        return Err(Error::Config(format!(
            "dataset classes {} must be in 1..={}",
            cfg.classes,
            inv.num_classes()
        )));
    }
    if cfg.eval_utterances > cfg.utterances {
        return Err(Error::Config("more eval utterances than utterances".into()));
    }
    let book = RecipeBook::grid(cfg.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sequences = deal_sequences(cfg, &mut rng);
    fs::create_dir_all(dir.join("audio"))?;
    let mut records = Vec::with_capacity(cfg.utterances);
    for (i, seq) in sequences.into_iter().enumerate() {
        let tokens = seq.iter().map(|&c| inv.symbol(c).to_string()).collect();
        let spec = random_spec(seq, cfg.duration_mean_ms, cfg.duration_std_ms, &mut rng);
        let utt = synth_utterance(&spec, &book)?;
        let rel = PathBuf::from("audio").join(format!("utt_{i:05}.wav"));
        write_wav(dir.join(&rel), &utt.clip, WavEncoding::Pcm16)?;
        records.push(ManifestRecord {
            path: rel,
            tokens,
            lang: cfg.lang.clone(),
            split: if i >= cfg.utterances - cfg.eval_utterances { "eval" } else { "train" }.into(),
        });
    }
    let manifest = Manifest {
        records,
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.tsv"))?;
    fs::write(dir.join("inventory.tsv"), inv.truncated(cfg.classes)?.to_tsv())?;
    Ok(manifest)
}
