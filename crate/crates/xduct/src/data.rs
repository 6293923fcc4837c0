//! Task data: TSV readers/writers for the three corpus formats, vocabulary
//! construction, splits, and synthetic task generation.
//!
//! Symbols are strings rather than chars because phonemes (`AE`, `SH`) and
//! morphological subtags (`AT+ALL`) are multi-character units. Orthographic
//! sides are split per character after NFC normalization.

use std::collections::HashMap;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng;

/// Reserved vocabulary slots.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    G2p,
    Transliteration,
    Inflection,
    Synthetic,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::G2p => "g2p",
            TaskKind::Transliteration => "translit",
            TaskKind::Inflection => "inflection",
            TaskKind::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g2p" => Ok(TaskKind::G2p),
            "translit" | "transliteration" => Ok(TaskKind::Transliteration),
            "inflection" => Ok(TaskKind::Inflection),
            "synthetic" => Ok(TaskKind::Synthetic),
            other => Err(Error::Config { what: format!("unknown task kind `{other}`") }),
        }
    }
}

/// One source/target pair as symbol sequences. For inflection the source is
/// the subtag sequence followed by the lemma's characters; `tag_count` marks
/// where the subtags end so cached TSV reproduces the original columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub tag_count: usize,
}

impl Example {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Self {
        Example { source, target, tag_count: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskKind,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Injective symbol <-> index map with the four reserved entries up front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary in first-occurrence order over the given symbol
    /// sequences (one side of a corpus).
    pub fn build<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut v = Vocabulary {
            symbols: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: RESERVED.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect(),
        };
        let mut any = false;
        for seq in sequences {
            any = true;
            for sym in seq {
                if RESERVED.contains(&sym.as_str()) {
                    return Err(Error::Vocab {
                        what: format!("data symbol `{sym}` collides with a reserved entry"),
                    });
                }
                if !v.index.contains_key(sym) {
                    v.index.insert(sym.clone(), v.symbols.len());
                    v.symbols.push(sym.clone());
                }
            }
        }
        if !any {
            return Err(Error::EmptyDataset { what: "vocabulary over zero sequences".into() });
        }
        Ok(v)
    }

    /// Restores the index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    /// Index of a symbol, or UNK for out-of-vocabulary symbols.
    pub fn encode_symbol(&self, sym: &str) -> usize {
        self.index.get(sym).copied().unwrap_or(UNK)
    }

    pub fn decode_symbol(&self, idx: usize) -> Result<&str> {
        self.symbols.get(idx).map(String::as_str).ok_or(Error::IndexOutOfRange {
            op: "decode_symbol",
            index: idx,
            bound: self.symbols.len(),
        })
    }

    pub fn encode(&self, seq: &[String]) -> Vec<usize> {
        seq.iter().map(|s| self.encode_symbol(s)).collect()
    }

    /// Encodes a target sequence and appends EOS.
    pub fn encode_with_eos(&self, seq: &[String]) -> Vec<usize> {
        let mut ids = self.encode(seq);
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.decode_symbol(i).map(str::to_string)).collect()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

// ── TSV reading and writing ─────────────────────────────────────────────

fn nfc(line: &str) -> String {
    line.nfc().collect()
}

fn char_symbols(s: &str) -> Vec<String> {
    s.chars().map(|c| c.to_string()).collect()
}

fn parse_line(task: TaskKind, line: &str) -> std::result::Result<Example, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    let example = match task {
        TaskKind::G2p => {
            let [word, phonemes] = cols[..] else {
                return Err(format!("expected `word<TAB>phonemes`, found {} columns", cols.len()));
            };
            Example::new(
                char_symbols(word),
                phonemes.split_whitespace().map(str::to_string).collect(),
            )
        }
        TaskKind::Transliteration | TaskKind::Synthetic => {
            let [src, tgt] = cols[..] else {
                return Err(format!("expected `source<TAB>target`, found {} columns", cols.len()));
            };
            Example::new(char_symbols(src), char_symbols(tgt))
        }
        TaskKind::Inflection => {
            let [lemma, form, tags] = cols[..] else {
                return Err(format!(
                    "expected `lemma<TAB>form<TAB>tags`, found {} columns",
                    cols.len()
                ));
            };
            let mut source: Vec<String> = tags.split(';').map(str::to_string).collect();
            if source.iter().any(String::is_empty) {
                return Err("empty subtag in tag column".into());
            }
            let tag_count = source.len();
            source.extend(char_symbols(lemma));
            Example { source, target: char_symbols(form), tag_count }
        }
    };
    if example.source.is_empty() || example.target.is_empty() {
        return Err("empty source or target".into());
    }
    Ok(example)
}

/// Renders an example back into its task's line format.
pub fn format_line(task: TaskKind, ex: &Example) -> String {
    match task {
        TaskKind::G2p => {
            format!("{}\t{}", ex.source.concat(), ex.target.join(" "))
        }
        TaskKind::Transliteration | TaskKind::Synthetic => {
            format!("{}\t{}", ex.source.concat(), ex.target.concat())
        }
        TaskKind::Inflection => {
            let (tags, lemma) = ex.source.split_at(ex.tag_count.min(ex.source.len()));
            format!("{}\t{}\t{}", lemma.concat(), ex.target.concat(), tags.join(";"))
        }
    }
}

/// Reads one task-format TSV. Blank lines are skipped; a zero-byte file is
/// rejected outright, while a file of only blank lines yields zero examples
/// (callers reject empty datasets at use).
pub fn read_tsv(path: &Path, task: TaskKind) -> Result<Vec<Example>> {
    let raw = std::fs::read_to_string(path)?;
    if raw.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            line: 0,
            what: "file is empty".into(),
        });
    }
    let mut examples = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = nfc(line.trim_end_matches('\r'));
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(task, &line) {
            Ok(ex) => examples.push(ex),
            Err(what) => {
                return Err(Error::Format { path: path.display().to_string(), line: i + 1, what })
            }
        }
    }
    Ok(examples)
}

pub fn write_tsv(path: &Path, task: TaskKind, examples: &[Example]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&format_line(task, ex));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── splits ──────────────────────────────────────────────────────────────

/// Seeded 5% dev / 10% test / 85% train split (sizes floored).
pub fn split_g2p(examples: Vec<Example>, seed: u64) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let n = examples.len();
    if n < 20 {
        return Err(Error::InvalidArgument {
            op: "split_g2p",
            what: format!("need at least 20 examples to split, got {n}"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "g2p-split", &[]));
    let n_dev = n * 5 / 100;
    let n_test = n * 10 / 100;
    let mut examples: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Example> {
        idx.iter().map(|&i| examples[i].take().expect("disjoint indices")).collect()
    };
    let dev = take(&order[..n_dev]);
    let test = take(&order[n_dev..n_dev + n_test]);
    let train = take(&order[n_dev + n_test..]);
    Ok((train, dev, test))
}

// ── synthetic tasks ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    Reduplicate,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "reduplicate" => Ok(SyntheticTask::Reduplicate),
            other => Err(Error::Config { what: format!("unknown synthetic task `{other}`") }),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::Reduplicate => "reduplicate",
        };
        f.write_str(s)
    }
}

/// Applies the synthetic transformation rule to one string.
pub fn synthetic_target(task: SyntheticTask, source: &[String]) -> Vec<String> {
    match task {
        SyntheticTask::Copy => source.to_vec(),
        SyntheticTask::Reverse => source.iter().rev().cloned().collect(),
        SyntheticTask::Reduplicate => {
            // the length-3 prefix is prepended: mejr -> mejmejr
            let mut out: Vec<String> = source[..3.min(source.len())].to_vec();
            out.extend_from_slice(source);
            out
        }
    }
}

/// Generates `n_train` training pairs plus `ceil(n_train/10)` dev and test
/// pairs each, all with distinct source strings. Source lengths are uniform
/// over `len_range` (inclusive) over the first `alphabet_size` lowercase
/// letters.
pub fn gen_synthetic(
    task: SyntheticTask,
    n_train: usize,
    len_range: (usize, usize),
    alphabet_size: usize,
    seed: u64,
) -> Result<Dataset> {
    let (min_len, max_len) = len_range;
    if min_len == 0 || min_len > max_len {
        return Err(Error::InvalidArgument {
            op: "gen_synthetic",
            what: format!("bad length range {min_len}..={max_len}"),
        });
    }
    if task == SyntheticTask::Reduplicate && min_len < 3 {
        return Err(Error::InvalidArgument {
            op: "gen_synthetic",
            what: "reduplication needs source length >= 3".into(),
        });
    }
    if alphabet_size == 0 || alphabet_size > 26 {
        return Err(Error::InvalidArgument {
            op: "gen_synthetic",
            what: format!("alphabet size {alphabet_size} outside 1..=26"),
        });
    }
    let n_heldout = n_train.div_ceil(10);
    let total = n_train + 2 * n_heldout;

    // capacity check: number of distinct strings with lengths in range
    let mut capacity: f64 = 0.0;
    for l in min_len..=max_len {
        capacity += (alphabet_size as f64).powi(l as i32);
        if capacity > 1e16 {
            break;
        }
    }
    if (total as f64) > capacity {
        return Err(Error::InvalidArgument {
            op: "gen_synthetic",
            what: format!(
                "cannot draw {total} distinct strings from {capacity:.0} possible"
            ),
        });
    }

    let alphabet: Vec<String> =
        (0..alphabet_size).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
    let mut rng = rng::stream(seed, "synthetic", &[task as u64]);
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while examples.len() < total {
        attempts += 1;
        if attempts > total * 1000 {
            return Err(Error::InvalidArgument {
                op: "gen_synthetic",
                what: "could not find enough distinct strings".into(),
            });
        }
        let len = rng.gen_range(min_len..=max_len);
        let source: Vec<String> =
            (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())].clone()).collect();
        if !seen.insert(source.clone()) {
            continue;
        }
        let target = synthetic_target(task, &source);
        examples.push(Example::new(source, target));
    }
    let test = examples.split_off(n_train + n_heldout);
    let dev = examples.split_off(n_train);
    Ok(Dataset { task: TaskKind::Synthetic, train: examples, dev, test })
}
