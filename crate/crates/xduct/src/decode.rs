//! Greedy decoding and alignment analysis: per-step attention extraction,
//! crossing-edge monotonicity classification, confusion summaries, and
//! tab-separated heatmap export for external plotting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::model::TransducerModel;
use crate::tensor::Graph;

/// Attention mass below or at this weight does not form an alignment edge.
pub const EDGE_THRESHOLD: f64 = 0.1;

/// Symbols appended to the source length when no explicit cap is given.
pub const EXTRA_LENGTH_BUDGET: usize = 50;

/// A greedily decoded output with its per-step alignment distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub source: Vec<usize>,
    /// Emitted symbols; ends with EOS unless the length cap was hit.
    pub output: Vec<usize>,
    /// One attention/alignment row per emitted symbol, `source.len()` wide.
    pub alpha: Vec<Vec<f64>>,
    /// Log-probability of each emitted symbol under the step's full law.
    pub step_log_probs: Vec<f64>,
}

/// Highest-probability symbol that may be emitted; ties break toward the
/// lowest index. PAD, BOS, and UNK are never emitted.
fn best_emittable(probs: &[f64]) -> (usize, f64) {
    let mut best = EOS;
    let mut best_p = f64::NEG_INFINITY;
    for (v, &p) in probs.iter().enumerate() {
        if v == PAD || v == BOS || v == UNK {
            continue;
        }
        if p > best_p {
            best = v;
            best_p = p;
        }
    }
    (best, best_p)
}

/// Decodes one source greedily: at each step the full next-symbol
/// distribution is computed — the mixed-over-alignments law for hard
/// models, the attention law for soft ones — and its argmax emitted,
/// until EOS or the cap (`source length + EXTRA_LENGTH_BUDGET` if none
/// given). Never samples, so repeated runs are identical.
pub fn greedy_decode(
    model: &TransducerModel,
    x: &[usize],
    max_len: Option<usize>,
) -> Result<DecodeResult> {
    let cap = max_len.unwrap_or(x.len() + EXTRA_LENGTH_BUDGET);
    if cap == 0 {
        return Err(Error::InvalidArgument {
            op: "greedy_decode",
            what: "length cap must be at least 1".into(),
        });
    }
    let mut g = Graph::new();
    let nodes = model.register(&mut g, false)?;
    let src = model.encode_source(&mut g, &nodes, x, &mut None)?;
    let mut state = model.init_step_state(&mut g, &nodes);

    let mut result = DecodeResult {
        source: x.to_vec(),
        output: Vec::new(),
        alpha: Vec::new(),
        step_log_probs: Vec::new(),
    };
    let mut y_prev = BOS;
    let vocab = model.tgt_vocab_size;
    while result.output.len() < cap {
        let (out, next) = model.advance(&mut g, &nodes, &src, y_prev, &state, &mut None)?;
        let alpha = g.value(out.alpha).to_vec();
        let (symbol, log_p) = if let Some(rows) = out.hard_log_rows {
            let log_rows = g.value(rows);
            let mixed: Vec<f64> = (0..vocab)
                .map(|v| {
                    (0..x.len()).map(|j| alpha[j] * log_rows[j * vocab + v].exp()).sum::<f64>()
                })
                .collect();
            let (symbol, p) = best_emittable(&mixed);
            (symbol, p.ln())
        } else {
            let dist = out.soft_log_dist.expect("soft model emits a full law");
            let (symbol, log_p) = best_emittable(g.value(dist));
            (symbol, log_p)
        };
        result.output.push(symbol);
        result.alpha.push(alpha);
        result.step_log_probs.push(log_p);
        if symbol == EOS {
            break;
        }
        y_prev = symbol;
        state = next;
    }
    Ok(result)
}

/// Decodes every input, optionally fanning out across threads; results
/// keep input order and match the single-threaded run exactly.
pub fn decode_corpus(
    model: &TransducerModel,
    inputs: &[Vec<usize>],
    max_len: Option<usize>,
    threads: usize,
) -> Result<Vec<DecodeResult>> {
    match threads {
        0 => Err(Error::Config { what: "thread count must be at least 1".into() }),
        1 => inputs.iter().map(|x| greedy_decode(model, x, max_len)).collect(),
        n => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config { what: format!("thread pool: {e}") })?;
            pool.install(|| {
                inputs.par_iter().map(|x| greedy_decode(model, x, max_len)).collect()
            })
        }
    }
}

// ── monotonicity ────────────────────────────────────────────────────────

/// Alignment edges above the weight threshold and whether any pair of
/// them crosses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonotonicityVerdict {
    /// `(source position, output step)` pairs with `α > threshold`.
    pub edges: Vec<(usize, usize)>,
    pub crossing: bool,
    /// Whether the decoded output matched its reference, when one was given.
    pub correct: Option<bool>,
}

/// Draws an edge (j, i) wherever output step i puts more than `threshold`
/// mass on source position j, then reports whether any two edges cross:
/// i < i′ with j > j′. The EOS step's row is excluded unless asked for,
/// since EOS marks termination rather than a transduced symbol.
pub fn classify_monotonicity(
    result: &DecodeResult,
    threshold: f64,
    include_eos_row: bool,
) -> MonotonicityVerdict {
    let mut rows = result.alpha.len();
    if !include_eos_row && result.output.last() == Some(&EOS) {
        rows -= 1;
    }
    let mut edges = Vec::new();
    for (i, row) in result.alpha.iter().take(rows).enumerate() {
        for (j, &a) in row.iter().enumerate() {
            if a > threshold {
                edges.push((j, i));
            }
        }
    }
    let crossing = edges.iter().any(|&(j, i)| {
        edges.iter().any(|&(j2, i2)| i < i2 && j > j2)
    });
    MonotonicityVerdict { edges, crossing, correct: None }
}

/// Verdict counts split by whether the decoded output matched its
/// reference exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionTable {
    pub monotonic_correct: usize,
    pub monotonic_incorrect: usize,
    pub crossing_correct: usize,
    pub crossing_incorrect: usize,
}

impl ConfusionTable {
    pub fn total(&self) -> usize {
        self.monotonic_correct + self.monotonic_incorrect + self.crossing_correct
            + self.crossing_incorrect
    }
}

/// Tallies monotonic/crossing verdicts against exact-match correctness.
/// References must be in the decoder's own form: indices ending with EOS.
pub fn confusion_table(
    results: &[DecodeResult],
    references: &[Vec<usize>],
    threshold: f64,
) -> Result<ConfusionTable> {
    if results.len() != references.len() {
        return Err(Error::InvalidArgument {
            op: "confusion_table",
            what: format!("{} decodes against {} references", results.len(), references.len()),
        });
    }
    let mut table = ConfusionTable::default();
    for (result, reference) in results.iter().zip(references) {
        let verdict = classify_monotonicity(result, threshold, false);
        let correct = &result.output == reference;
        let cell = match (verdict.crossing, correct) {
            (false, true) => &mut table.monotonic_correct,
            (false, false) => &mut table.monotonic_incorrect,
            (true, true) => &mut table.crossing_correct,
            (true, false) => &mut table.crossing_incorrect,
        };
        *cell += 1;
    }
    Ok(table)
}

// ── heatmap export ──────────────────────────────────────────────────────

/// Writes the attention/alignment matrix as tab-separated text: header row
/// of source symbols, one row per emitted symbol, weights to 6 decimals.
pub fn export_heatmap(
    result: &DecodeResult,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    let sources = src_vocab.decode(&result.source)?;
    let outputs = tgt_vocab.decode(&result.output)?;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "\t{}", sources.join("\t"))?;
    for (symbol, row) in outputs.iter().zip(&result.alpha) {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.6}")).collect();
        writeln!(out, "{symbol}\t{}", cells.join("\t"))?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a heatmap file back into `(source symbols, output symbols,
/// weight rows)`.
pub fn read_heatmap(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.ok_or(Error::Format {
        path: path.display().to_string(),
        line: 1,
        what: "missing header row".into(),
    })?;
    let sources: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let mut fields = line.split('\t');
        let symbol = fields.next().unwrap_or_default();
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse().map_err(|_| Error::Format {
                    path: path.display().to_string(),
                    line: idx + 2,
                    what: format!("bad weight {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != sources.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                line: idx + 2,
                what: format!("{} cells for {} source symbols", row.len(), sources.len()),
            });
        }
        outputs.push(symbol.to_string());
        rows.push(row);
    }
    Ok((sources, outputs, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchitectureKind, ModelConfig, TransducerModel};
    use crate::train::{fit, mean_log_likelihood, TrainConfig};

    fn tiny_model(arch: ArchitectureKind, seed: u64) -> TransducerModel {
        build_model(ModelConfig::new(arch, 3, 2, 1, 2, 1, 0.0), 6, 7, seed).unwrap()
    }

    fn vocab(symbols: &[&str]) -> Vocabulary {
        let owned: Vec<String> = symbols.iter().map(|s| s.to_string()).collect();
        Vocabulary::build(std::iter::once(owned.as_slice())).unwrap()
    }

    fn fixture(alpha: Vec<Vec<f64>>, output: Vec<usize>) -> DecodeResult {
        let width = alpha.first().map_or(0, Vec::len);
        DecodeResult {
            source: (0..width).map(|j| 4 + j % 2).collect(),
            step_log_probs: vec![-0.5; output.len()],
            output,
            alpha,
        }
    }

    // ── greedy decoding ─────────────────────────────────────────────────

    #[test]
    fn overfit_model_reproduces_its_training_pair() {
        let mut model = tiny_model(ArchitectureKind::Hard, 11);
        let data = vec![(vec![4usize], vec![5usize, EOS])];
        let mut cfg = TrainConfig::new(1, 5);
        cfg.lr = 0.03;
        cfg.max_epochs = 60;
        fit(&mut model, &vocab(&["a", "b"]), &vocab(&["a", "b", "c"]), &data, &data, &cfg, |m, d| {
            mean_log_likelihood(m, d)
        })
        .unwrap();
        let result = greedy_decode(&model, &[4], None).unwrap();
        assert_eq!(result.output, vec![5, EOS]);
        assert_eq!(result.alpha.len(), 2, "one alignment row per emitted symbol");
    }

    #[test]
    fn length_cap_one_emits_exactly_one_symbol() {
        for arch in
            [ArchitectureKind::Hard, ArchitectureKind::Soft, ArchitectureKind::HardInputFed]
        {
            let model = tiny_model(arch, 3);
            let result = greedy_decode(&model, &[4, 5], Some(1)).unwrap();
            assert_eq!(result.output.len(), 1);
            assert_eq!(result.alpha.len(), 1);
            assert_eq!(result.step_log_probs.len(), 1);
            let v = result.output[0];
            assert!(v != PAD && v != BOS && v != UNK, "forbidden symbol {v} emitted");
        }
    }

    #[test]
    fn zero_length_cap_is_rejected() {
        let model = tiny_model(ArchitectureKind::Hard, 3);
        assert!(matches!(
            greedy_decode(&model, &[4], Some(0)),
            Err(Error::InvalidArgument { op: "greedy_decode", .. })
        ));
    }

    #[test]
    fn ties_break_toward_the_lowest_symbol_index() {
        // uniform: everything ties, EOS is the lowest emittable index
        assert_eq!(best_emittable(&[0.2; 6]).0, EOS);
        // PAD/BOS/UNK hold the largest mass but may not be emitted
        assert_eq!(best_emittable(&[0.9, 0.9, 0.1, 0.9, 0.2, 0.3]).0, 5);
        // a genuine tie between two emittable symbols
        assert_eq!(best_emittable(&[0.0, 0.0, 0.1, 0.0, 0.4, 0.4]).0, 4);
    }

    #[test]
    fn decode_is_deterministic_and_rows_are_distributions() {
        for arch in [
            ArchitectureKind::Hard,
            ArchitectureKind::HardInputFed,
            ArchitectureKind::Soft,
            ArchitectureKind::SoftInputFed,
        ] {
            let model = tiny_model(arch, 8);
            let x = [4usize, 5, 4, 5];
            let a = greedy_decode(&model, &x, None).unwrap();
            let b = greedy_decode(&model, &x, None).unwrap();
            assert_eq!(a, b, "repeated decode must be bitwise identical");
            assert_eq!(a.alpha.len(), a.output.len());
            for row in &a.alpha {
                assert_eq!(row.len(), x.len());
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "row sums to {sum}");
            }
            for &lp in &a.step_log_probs {
                assert!(lp <= 1e-12, "log-probability {lp} is positive");
            }
            assert!(
                a.output.last() == Some(&EOS) || a.output.len() == x.len() + EXTRA_LENGTH_BUDGET
            );
        }
    }

    #[test]
    fn corpus_decode_matches_per_input_decode_across_threads() {
        let model = tiny_model(ArchitectureKind::Hard, 4);
        let inputs: Vec<Vec<usize>> = vec![vec![4], vec![5, 4], vec![4, 4, 5]];
        let single: Vec<DecodeResult> =
            inputs.iter().map(|x| greedy_decode(&model, x, None).unwrap()).collect();
        assert_eq!(decode_corpus(&model, &inputs, None, 1).unwrap(), single);
        assert_eq!(decode_corpus(&model, &inputs, None, 2).unwrap(), single);
        assert!(decode_corpus(&model, &inputs, None, 0).is_err());
    }

    // ── monotonicity ────────────────────────────────────────────────────

    #[test]
    fn diagonal_alignment_is_monotonic() {
        let r = fixture(
            vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]],
            vec![4, 5, 4],
        );
        let v = classify_monotonicity(&r, EDGE_THRESHOLD, false);
        assert_eq!(v.edges, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(!v.crossing);
    }

    #[test]
    fn swapped_alignment_crosses() {
        let r = fixture(vec![vec![0.05, 0.95], vec![0.95, 0.05]], vec![4, 5]);
        let v = classify_monotonicity(&r, EDGE_THRESHOLD, false);
        assert_eq!(v.edges, vec![(1, 0), (0, 1)]);
        assert!(v.crossing);
    }

    #[test]
    fn uniform_attention_over_three_positions_crosses() {
        let third = 1.0 / 3.0;
        let r = fixture(vec![vec![third; 3]; 3], vec![4, 5, 4]);
        let v = classify_monotonicity(&r, EDGE_THRESHOLD, false);
        assert_eq!(v.edges.len(), 9, "every weight exceeds the threshold");
        assert!(v.crossing);
        // exhaustive pair check agrees
        let brute = v.edges.iter().any(|&(j, i)| {
            v.edges.iter().any(|&(j2, i2)| i < i2 && j > j2)
        });
        assert!(brute);
    }

    #[test]
    fn sub_threshold_mass_never_changes_the_verdict() {
        let clean = fixture(vec![vec![0.9, 0.0], vec![0.0, 0.9]], vec![4, 5]);
        let noisy = fixture(vec![vec![0.9, 0.09], vec![0.1, 0.9]], vec![4, 5]);
        let a = classify_monotonicity(&clean, EDGE_THRESHOLD, false);
        let b = classify_monotonicity(&noisy, EDGE_THRESHOLD, false);
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.crossing, b.crossing);
    }

    #[test]
    fn eos_row_is_excluded_unless_asked_for() {
        // the EOS step looks back at position 0, which would cross
        let r = fixture(
            vec![vec![0.9, 0.05, 0.05], vec![0.05, 0.9, 0.05], vec![0.9, 0.05, 0.05]],
            vec![4, 5, EOS],
        );
        assert!(!classify_monotonicity(&r, EDGE_THRESHOLD, false).crossing);
        assert!(classify_monotonicity(&r, EDGE_THRESHOLD, true).crossing);
        // without a terminal EOS every row participates
        let capped = fixture(
            vec![vec![0.9, 0.1], vec![0.1, 0.9], vec![0.9, 0.1]],
            vec![4, 5, 4],
        );
        assert!(classify_monotonicity(&capped, EDGE_THRESHOLD, false).crossing);
    }

    // ── confusion table ─────────────────────────────────────────────────

    #[test]
    fn all_correct_monotonic_corpus_fills_one_cell() {
        let results = vec![
            fixture(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![4, EOS]),
            fixture(vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![5, EOS]),
        ];
        let refs = vec![vec![4, EOS], vec![5, EOS]];
        let t = confusion_table(&results, &refs, EDGE_THRESHOLD).unwrap();
        assert_eq!(t.monotonic_correct, 2);
        assert_eq!(t.total(), 2);
        assert_eq!(
            (t.monotonic_incorrect, t.crossing_correct, t.crossing_incorrect),
            (0, 0, 0)
        );
    }

    #[test]
    fn confusion_counts_cover_every_cell_and_sum_to_corpus_size() {
        let results = vec![
            fixture(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![4, EOS]),
            fixture(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![5, EOS]),
            fixture(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]], vec![4, 5, EOS]),
            fixture(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]], vec![5, 4, EOS]),
        ];
        let refs = vec![vec![4, EOS], vec![4, EOS], vec![4, 5, EOS], vec![6, EOS]];
        let t = confusion_table(&results, &refs, EDGE_THRESHOLD).unwrap();
        assert_eq!(t.monotonic_correct, 1);
        assert_eq!(t.monotonic_incorrect, 1);
        assert_eq!(t.crossing_correct, 1);
        assert_eq!(t.crossing_incorrect, 1);
        assert_eq!(t.total(), results.len());
    }

    #[test]
    fn mismatched_reference_count_is_an_error() {
        let results = vec![fixture(vec![vec![1.0]], vec![EOS])];
        assert!(matches!(
            confusion_table(&results, &[], EDGE_THRESHOLD),
            Err(Error::InvalidArgument { op: "confusion_table", .. })
        ));
    }

    // ── heatmap files ───────────────────────────────────────────────────

    #[test]
    fn heatmap_round_trips_to_six_decimals() {
        let src_vocab = vocab(&["a", "b"]);
        let tgt_vocab = vocab(&["x", "y", "z"]);
        let result = DecodeResult {
            source: vec![4, 5, 4],
            output: vec![6, 4, EOS],
            alpha: vec![
                vec![0.123456789, 0.7, 0.176543211],
                vec![0.2, 0.3, 0.5],
                vec![0.25, 0.5, 0.25],
            ],
            step_log_probs: vec![-0.1, -0.2, -0.3],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.tsv");
        export_heatmap(&result, &src_vocab, &tgt_vocab, &path).unwrap();

        let (sources, outputs, rows) = read_heatmap(&path).unwrap();
        assert_eq!(sources, vec!["a", "b", "a"]);
        assert_eq!(outputs, vec!["z", "x", "<eos>"]);
        for (parsed, original) in rows.iter().zip(&result.alpha) {
            for (p, o) in parsed.iter().zip(original) {
                assert!((p - o).abs() <= 5e-7, "{p} vs {o}");
            }
            let sum: f64 = parsed.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn one_hot_rows_render_a_single_full_weight() {
        let src_vocab = vocab(&["a", "b"]);
        let tgt_vocab = vocab(&["x"]);
        let result = DecodeResult {
            source: vec![4, 5],
            output: vec![4, EOS],
            alpha: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            step_log_probs: vec![-0.1, -0.2],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("onehot.tsv");
        export_heatmap(&result, &src_vocab, &tgt_vocab, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines().skip(1) {
            assert_eq!(line.matches("1.000000").count(), 1, "row {line:?}");
        }
    }

    #[test]
    fn unwritable_heatmap_path_is_an_io_error() {
        let result = fixture(vec![vec![1.0]], vec![EOS]);
        let path = Path::new("/nonexistent-dir/heat.tsv");
        assert!(matches!(
            export_heatmap(&result, &vocab(&["a"]), &vocab(&["x"]), path),
            Err(Error::Io(_))
        ));
    }
}
