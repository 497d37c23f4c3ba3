//! `cupe` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 audio, 5 configuration,
//! 6 checkpoint, 7 non-finite values during training, 8 inventory or
//! manifest labels. Log records go to stderr as JSON lines; `CUPE_LOG`
//! sets the level (`error`, `warn`, `info`, `debug`, `trace`).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cupe::data::{load_wav, make_dataset, DatasetConfig, Manifest};
use cupe::metrics::timeline_export;
use cupe::model::checkpoint::Checkpoint;
use cupe::model::EncoderState;
use cupe::phonemap::PhonemeInventory;
use cupe::train::state::{check_inventory, config_snapshot, inventory_classes, optimizer_step, run_kind};
use cupe::train::{evaluate_corpus, finetune, infer, pretrain_ssl, train_supervised, write_eval, Corpus, TrainConfig};
use cupe::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_AUDIO: u8 = 4;
pub const EXIT_CONFIG: u8 = 5;
pub const EXIT_CHECKPOINT: u8 = 6;
pub const EXIT_NON_FINITE: u8 = 7;
pub const EXIT_INVENTORY: u8 = 8;

#[derive(Parser)]
#[command(name = "cupe", version, about = "Windowed phoneme encoder: data, training and decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus generation.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Supervised CTC training from scratch.
    Train(TrainArgs),
    /// Self-supervised masked-prediction pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained encoder with a fresh classifier.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a labelled manifest.
    Eval(EvalArgs),
    /// Decode one WAV file.
    Infer(InferArgs),
    /// Print a checkpoint's header, parameter counts and hash.
    InspectCheckpoint {
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Write synthetic WAVs, `manifest.tsv` and `inventory.tsv` to a directory.
    Make {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        utterances: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trailing utterances assigned to the `eval` split.
        #[arg(long, default_value_t = 0)]
        eval_utterances: usize,
        /// Inventory whose first classes label the corpus.
        #[arg(long)]
        inventory: Option<PathBuf>,
    },
}

/// Flags shared by the training verbs; each overrides the config file.
#[derive(Args)]
struct RunFlags {
    /// TOML training config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the CPU-sized model when no config file is given.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest split to train on (all records when absent).
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Inventory TSV (the shipped 65-class table when absent).
    #[arg(long)]
    inventory: Option<PathBuf>,
    #[arg(long)]
    alpha_s: Option<f64>,
    #[arg(long)]
    validate_every: Option<usize>,
    /// Stop once validation PER drops below this.
    #[arg(long)]
    early_stop_per: Option<f64>,
    /// Manifest split used for validation.
    #[arg(long)]
    valid_split: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    codebook_decay: Option<f64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Pretraining checkpoint.
    #[arg(long)]
    from: PathBuf,
    /// Train the feature extractor too.
    #[arg(long)]
    unfreeze_features: bool,
    #[arg(long)]
    lr_scale: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    inventory: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Directory for report.json, confusion.tsv and utterances.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Also write one posterior timeline per utterance.
    #[arg(long)]
    timelines: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    wav: PathBuf,
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Write per-frame posteriors as CSV.
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Wav { .. } | Error::SampleRate { .. } | Error::Channels { .. } => EXIT_AUDIO,
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Checkpoint(_) | Error::Missing(_) => EXIT_CHECKPOINT,
        Error::NonFinite(_) => EXIT_NON_FINITE,
        Error::Inventory { .. } | Error::UnknownSymbol(_) | Error::Manifest { .. } | Error::InfeasibleTarget { .. } => EXIT_INVENTORY,
        Error::Shape { .. } | Error::BatchTooSmall(_) | Error::Empty(_) | Error::NoForward(_) => EXIT_CONFIG,
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("CUPE_LOG", "info");
    env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let msg = record.args().to_string();
            let mut line = json!({"level": record.level().as_str().to_lowercase(), "target": record.target()});
            match serde_json::from_str::<serde_json::Value>(&msg) {
                Ok(serde_json::Value::Object(fields)) => line.as_object_mut().expect("object").extend(fields),
                _ => {
                    line["message"] = msg.into();
                }
            }
            writeln!(buf, "{line}")
        })
        .init();
}

fn load_inventory(path: Option<&Path>) -> cupe::Result<PhonemeInventory> {
    match path {
        Some(p) => PhonemeInventory::load(p),
        None => Ok(PhonemeInventory::default_inventory()),
    }
}

fn build_config(run: &RunFlags, inv_classes: Option<usize>) -> cupe::Result<TrainConfig> {
    let mut cfg = match (&run.config, run.desk) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, true) => TrainConfig::desk(inv_classes.unwrap_or(8)),
        (None, false) => TrainConfig::default(),
    };
    if run.config.is_none() {
        if let Some(c) = inv_classes {
            cfg.model.num_classes = c;
        }
    }
    macro_rules! set {
        ($($flag:expr => $field:expr),* $(,)?) => {
            $(if let Some(v) = $flag { $field = v; })*
        };
    }
    set!(run.seed => cfg.seed, run.steps => cfg.steps, run.batch_size => cfg.batch_size, run.lr => cfg.lr,
        run.weight_decay => cfg.weight_decay, run.grad_clip => cfg.grad_clip);
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut TrainConfig, args: &TrainArgs) {
    if let Some(v) = args.alpha_s {
        cfg.alpha_s = v;
    }
    if let Some(v) = args.validate_every {
        cfg.validate_every = v;
    }
    if args.early_stop_per.is_some() {
        cfg.early_stop_per = args.early_stop_per;
    }
}

fn load_corpus(path: &Path, split: Option<&str>, inv: Option<&PhonemeInventory>, cfg: &TrainConfig) -> cupe::Result<Corpus> {
    let manifest = Manifest::load(path)?.filter_split(split);
    Corpus::load(&manifest, inv, cfg.unknown_symbols, &cfg.model.window, cfg.silence_threshold_db)
}

fn save(ck: &Checkpoint, out: &Path) -> cupe::Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ck.save(out)?;
    log::info!(target: "cupe::cli", "{}", json!({"event": "checkpoint_written", "path": out, "sha256": ck.hash()?}));
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> cupe::Result<()> {
    let inv = load_inventory(args.inventory.as_deref())?;
    let mut cfg = build_config(&args.run, Some(inv.num_classes()))?;
    apply_train_flags(&mut cfg, args);
    cfg.validate()?;
    let corpus = load_corpus(&args.run.manifest, args.run.split.as_deref(), Some(&inv), &cfg)?;
    let valid = match &args.valid_split {
        Some(s) => Some(load_corpus(&args.run.manifest, Some(s), Some(&inv), &cfg)?),
        None => None,
    };
    let out = train_supervised(&cfg, &corpus, valid.as_ref(), &inv)?;
    save(&out.checkpoint(&inv)?, &args.run.out)
}

fn cmd_pretrain(args: &PretrainArgs) -> cupe::Result<()> {
    let mut cfg = build_config(&args.run, None)?;
    if let Some(v) = args.mask_ratio {
        cfg.pretrain.mask_ratio = v;
    }
    if let Some(v) = args.codebook_decay {
        cfg.pretrain.codebook_decay = v;
    }
    cfg.validate()?;
    let corpus = load_corpus(&args.run.manifest, args.run.split.as_deref(), None, &cfg)?;
    let out = pretrain_ssl(&cfg, &corpus)?;
    log::info!(target: "cupe::cli", "{}", json!({"event": "codebook", "corpus_perplexity": out.corpus_perplexity(&corpus)?}));
    save(&out.checkpoint()?, &args.run.out)
}

fn cmd_finetune(args: &FinetuneArgs) -> cupe::Result<()> {
    let t = &args.train;
    let inv = load_inventory(t.inventory.as_deref())?;
    let pretrained = Checkpoint::load(&args.from)?;
    let mut cfg = build_config(&t.run, None)?;
    if t.run.config.is_none() {
        cfg.model = pretrained.model.clone();
    }
    apply_train_flags(&mut cfg, t);
    if args.unfreeze_features {
        cfg.finetune.freeze_features = false;
    }
    if let Some(v) = args.lr_scale {
        cfg.finetune.lr_scale = v;
    }
    cfg.validate()?;
    let corpus = load_corpus(&t.run.manifest, t.run.split.as_deref(), Some(&inv), &cfg)?;
    let valid = match &t.valid_split {
        Some(s) => Some(load_corpus(&t.run.manifest, Some(s), Some(&inv), &cfg)?),
        None => None,
    };
    let out = finetune(&cfg, &pretrained, &corpus, valid.as_ref(), &inv)?;
    save(&out.checkpoint(&inv)?, &t.run.out)
}

fn load_classifier(path: &Path, inventory: Option<&Path>) -> cupe::Result<(EncoderState, PhonemeInventory)> {
    let ck = Checkpoint::load(path)?;
    let inv = match inventory {
        Some(p) => PhonemeInventory::load(p)?,
        None => match inventory_classes(&ck) {
            Some(classes) => {
                let text: String = classes.iter().map(|c| format!("{c}\t{c}\n")).collect();
                PhonemeInventory::parse(&text)?
            }
            None => PhonemeInventory::default_inventory(),
        },
    };
    check_inventory(&ck, &inv)?;
    Ok((EncoderState::from_checkpoint(&ck)?, inv))
}

fn cmd_eval(args: &EvalArgs) -> cupe::Result<()> {
    let (model, inv) = load_classifier(&args.checkpoint, args.inventory.as_deref())?;
    let manifest = Manifest::load(&args.manifest)?.filter_split(args.split.as_deref());
    let win = &model.config.window;
    let corpus = Corpus::load(&manifest, Some(&inv), Default::default(), win, cupe::objectives::silence::DEFAULT_THRESHOLD_DB)?;
    let timelines = args.timelines.then(|| args.out.join("timelines"));
    let out = evaluate_corpus(&model, &corpus, &inv, timelines.as_deref())?;
    write_eval(&args.out, &out, &inv)?;
    let r = &out.report;
    println!(
        "{}",
        json!({"utterances": r.utterances, "per": r.per, "gp_macro": r.gp_macro, "gp_weighted": r.gp_weighted, "f1_macro": r.f1_macro})
    );
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> cupe::Result<()> {
    let (model, inv) = load_classifier(&args.checkpoint, args.inventory.as_deref())?;
    let clip = load_wav(&args.wav)?;
    let result = infer(&model, &clip.samples, &inv)?;
    if let Some(path) = &args.timeline {
        let p = &result.posteriors;
        timeline_export(path, &p.frames, p.frame_hop, &inv.labels(), None)?;
    }
    let mut stdout = std::io::stdout().lock();
    if args.json {
        writeln!(stdout, "{}", json!({"sequence": result.symbols(), "phones": result.phones}))?;
    } else {
        writeln!(stdout, "{}", result.symbols().join(" "))?;
        for p in &result.phones {
            writeln!(
                stdout,
                "{}\tframes {}..{}\t{:.3}-{:.3} s\tp={:.3}",
                p.symbol, p.start_frame, p.end_frame, p.start_s, p.end_s, p.confidence
            )?;
        }
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> cupe::Result<()> {
    let ck = Checkpoint::load(path)?;
    let mut groups = std::collections::BTreeMap::<String, usize>::new();
    for t in ck.with_role(cupe::model::checkpoint::TensorRole::Param) {
        let g = t.group.map_or("none", |g| g.as_str());
        *groups.entry(g.to_string()).or_default() += t.value.len();
    }
    let summary = json!({
        "path": path,
        "sha256": ck.hash()?,
        "kind": run_kind(&ck),
        "step": ck.step,
        "optimizer_step": optimizer_step(&ck),
        "tensors": ck.tensors.len(),
        "params": ck.param_count(),
        "params_by_group": groups,
        "model": ck.model,
        "inventory": inventory_classes(&ck),
        "config": config_snapshot(&ck),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

fn run(cli: Cli) -> cupe::Result<()> {
    match cli.command {
        Command::Dataset {
            action:
                DatasetAction::Make {
                    out,
                    utterances,
                    classes,
                    seed,
                    eval_utterances,
                    inventory,
                },
        } => {
            let inv = load_inventory(inventory.as_deref())?;
            let cfg = DatasetConfig {
                utterances,
                classes,
                seed,
                eval_utterances,
                ..DatasetConfig::default()
            };
            let m = make_dataset(&out, &cfg, &inv)?;
            log::info!(target: "cupe::cli", "{}", json!({"event": "dataset_written", "dir": out, "utterances": m.len()}));
            Ok(())
        }
        Command::Train(args) => cmd_train(&args),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Finetune(args) => cmd_finetune(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Infer(args) => cmd_infer(&args),
        Command::InspectCheckpoint { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            log::error!(target: "cupe::cli", "{}", json!({"event": "failed", "error": e.to_string(), "exit_code": code}));
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
