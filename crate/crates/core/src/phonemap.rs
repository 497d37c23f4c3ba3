//! Phoneme inventory: raw IPA symbols mapped onto a fixed class set, with an
//! optional reduction to broad phoneme groups.
//!
//! Inventory files hold `raw<TAB>class` records, one per line, with `#`
//! comments. A record whose raw symbol equals its class declares that class;
//! classes are numbered in declaration order. Group files hold
//! `class<TAB>group` records; groups are numbered in order of first use.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INVENTORY: &str = include_str!("../data/inventory.tsv");
pub const DEFAULT_GROUPS: &str = include_str!("../data/groups.tsv");
pub const BLANK_LABEL: &str = "<blank>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupTable {
    pub names: Vec<String>,
    /// Group index of each class.
    pub of_class: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeInventory {
    pub classes: Vec<String>,
    mapping: HashMap<String, usize>,
    /// Most tokens that can join into one raw symbol (its length in chars).
    max_join: usize,
    pub groups: Option<GroupTable>,
}

/// What to do with a token the inventory does not know.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "fallback")]
pub enum UnknownSymbols {
    #[default]
    Strict,
    /// Map to this class and count it.
    Lenient(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappedSequence {
    pub class_ids: Vec<usize>,
    /// Tokens replaced by the fallback class.
    pub unknown: usize,
}

fn records(text: &str) -> impl Iterator<Item = (usize, std::result::Result<(&str, &str), String>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            return None;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        Some((
            i + 1,
            match fields[..] {
                [a, b] if !a.is_empty() && !b.is_empty() => Ok((a, b)),
                _ => Err(format!("expected two tab-separated fields, got {line:?}")),
            },
        ))
    })
}

impl PhonemeInventory {
    /// The shipped 65-class inventory with its 15-group reduction.
    pub fn default_inventory() -> Self {
        Self::parse(DEFAULT_INVENTORY)
            .and_then(|inv| inv.with_groups(DEFAULT_GROUPS))
            .expect("shipped inventory is well formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (line, rec) in records(text) {
            let (raw, class) = rec.map_err(|reason| Error::Inventory { line, reason })?;
            if let Some(first) = seen.insert(raw, line) {
                return Err(Error::Inventory {
                    line,
                    reason: format!("raw symbol {raw:?} already mapped on line {first}"),
                });
            }
            pairs.push((line, raw.to_string(), class.to_string()));
        }
        if pairs.is_empty() {
            return Err(Error::Inventory {
                line: 0,
                reason: "no records".into(),
            });
        }
        let classes: Vec<String> = pairs.iter().filter(|(_, r, c)| r == c).map(|(_, _, c)| c.clone()).collect();
        let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut mapping = HashMap::with_capacity(pairs.len());
        for (line, raw, class) in &pairs {
            let &id = index.get(class.as_str()).ok_or_else(|| Error::Inventory {
                line: *line,
                reason: format!("class {class:?} is never declared (no {class}\\t{class} record)"),
            })?;
            mapping.insert(raw.clone(), id);
        }
        let mut inv = Self {
            classes,
            mapping,
            max_join: 1,
            groups: None,
        };
        inv.max_join = inv.mapping.keys().map(|k| k.chars().count()).max().unwrap_or(1);
        Ok(inv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The first `k` classes with the raw symbols that map to them. Group
    /// membership is kept for the surviving classes.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {k} of {} classes",
                self.num_classes()
            )));
        }
        let mapping: HashMap<String, usize> = self.mapping.iter().filter(|(_, &c)| c < k).map(|(r, &c)| (r.clone(), c)).collect();
        let max_join = mapping.keys().map(|r| r.chars().count()).max().unwrap_or(1);
        Ok(Self {
            classes: self.classes[..k].to_vec(),
            mapping,
            max_join,
            groups: self.groups.as_ref().map(|g| GroupTable {
                names: g.names.clone(),
                of_class: g.of_class[..k].to_vec(),
            }),
        })
    }

    /// Inventory file text: class declarations first, then aliases sorted
    /// by raw symbol.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# raw\tclass\n");
        for c in &self.classes {
            out.push_str(&format!("{c}\t{c}\n"));
        }
        let mut aliases: Vec<(&String, &usize)> = self.mapping.iter().filter(|(r, &c)| **r != self.classes[c]).collect();
        aliases.sort();
        for (raw, &c) in aliases {
            out.push_str(&format!("{raw}\t{}\n", self.classes[c]));
        }
        out
    }

    /// Attach a group table parsed from `class<TAB>group` text.
    pub fn with_groups(mut self, text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut of_class: Vec<Option<usize>> = vec![None; self.classes.len()];
        for (line, rec) in records(text) {
            let (class, group) = rec.map_err(|reason| Error::Inventory { line, reason })?;
            let id = self.class_id(class).ok_or_else(|| Error::Inventory {
                line,
                reason: format!("group table names unknown class {class:?}"),
            })?;
            if self.classes[id] != class {
                return Err(Error::Inventory {
                    line,
                    reason: format!("{class:?} is a raw symbol, not a class"),
                });
            }
            let g = match names.iter().position(|n| n == group) {
                Some(g) => g,
                None => {
                    names.push(group.to_string());
                    names.len() - 1
                }
            };
            if of_class[id].replace(g).is_some() {
                return Err(Error::Inventory {
                    line,
                    reason: format!("class {class:?} assigned to a group twice"),
                });
            }
        }
        let of_class = of_class
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.ok_or_else(|| Error::Inventory {
                    line: 0,
                    reason: format!("class {:?} has no group", self.classes[i]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.groups = Some(GroupTable { names, of_class });
        Ok(self)
    }

    pub fn load_groups(self, path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        self.with_groups(&text)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn blank_id(&self) -> usize {
        self.classes.len()
    }

    /// Class of a raw symbol.
    pub fn class_id(&self, raw: &str) -> Option<usize> {
        self.mapping.get(raw).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        self.classes.get(id).map_or(BLANK_LABEL, String::as_str)
    }

    /// Class symbols followed by the blank label.
    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().cloned().chain([BLANK_LABEL.to_string()]).collect()
    }

    /// Raw symbols known to the inventory.
    pub fn raw_symbols(&self) -> impl Iterator<Item = &str> {
        self.mapping.keys().map(String::as_str)
    }

    /// Map raw tokens to classes. At each position the longest run of
    /// adjacent tokens whose concatenation is a known symbol wins, so split
    /// affricates such as `t`,`s` resolve to `ts`.
    pub fn map_sequence<S: AsRef<str>>(&self, tokens: &[S], mode: UnknownSymbols) -> Result<MappedSequence> {
        if let UnknownSymbols::Lenient(f) = mode {
            if f >= self.num_classes() {
                return Err(Error::InvalidArgument(format!("fallback class {f} outside inventory")));
            }
        }
        let mut out = MappedSequence {
            class_ids: Vec::with_capacity(tokens.len()),
            unknown: 0,
        };
        let mut i = 0;
        while i < tokens.len() {
            let mut hit = None;
            let mut joined = String::new();
            for (k, tok) in tokens[i..tokens.len().min(i + self.max_join)].iter().enumerate() {
                joined.push_str(tok.as_ref());
                if let Some(id) = self.class_id(&joined) {
                    hit = Some((id, k + 1));
                }
            }
            match (hit, mode) {
                (Some((id, n)), _) => {
                    out.class_ids.push(id);
                    i += n;
                }
                (None, UnknownSymbols::Strict) => {
                    return Err(Error::UnknownSymbol(tokens[i].as_ref().to_string()));
                }
                (None, UnknownSymbols::Lenient(f)) => {
                    out.class_ids.push(f);
                    out.unknown += 1;
                    i += 1;
                }
            }
        }
        Ok(out)
    }

    /// Replace each class id by its broad group id.
    pub fn reduce_to_groups(&self, seq: &[usize]) -> Result<Vec<usize>> {
        let g = self.groups.as_ref().ok_or(Error::Missing("group table"))?;
        seq.iter()
            .map(|&c| {
                g.of_class
                    .get(c)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("class {c} outside inventory")))
            })
            .collect()
    }

    /// Inventory whose classes are this inventory's groups, each its own
    /// group.
    pub fn group_inventory(&self) -> Result<Self> {
        let g = self.groups.as_ref().ok_or(Error::Missing("group table"))?;
        let inv: String = g.names.iter().map(|n| format!("{n}\t{n}\n")).collect();
        let groups: String = g.names.iter().map(|n| format!("{n}\t{n}\n")).collect();
        Self::parse(&inv)?.with_groups(&groups)
    }
}
