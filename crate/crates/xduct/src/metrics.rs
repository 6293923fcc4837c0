//! Evaluation metrics for string transduction.
//!
//! All metrics operate on symbol slices so they apply equally to character
//! strings, phoneme sequences, and integer-encoded model output. The F-score
//! uses the quasi-LCS recovered from plain Levenshtein distance,
//! `LCS = (|c| + |r| - ED) / 2`, which counts substitutions as half matches
//! and can therefore be half-integral.

use crate::error::{Error, Result};

/// Unit-cost Levenshtein distance (insertions, deletions, substitutions).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-level and mean per-string phoneme/symbol error rate.
///
/// The corpus rate is `Σ ED / Σ |ref|` (the primary number); the mean rate
/// averages per-string `ED / max(|ref|, 1)`. An empty reference with a
/// nonempty hypothesis therefore contributes `|hyp|` errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRate {
    pub corpus: f64,
    pub mean: f64,
}

pub fn symbol_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<ErrorRate> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "symbol error rate over zero pairs".into() });
    }
    let mut total_edits = 0usize;
    let mut total_ref = 0usize;
    let mut ratio_sum = 0.0;
    for (hyp, reference) in pairs {
        let ed = edit_distance(hyp, reference);
        total_edits += ed;
        total_ref += reference.len();
        ratio_sum += ed as f64 / reference.len().max(1) as f64;
    }
    if total_ref == 0 {
        return Err(Error::InvalidArgument {
            op: "symbol_error_rate",
            what: "all references are empty".into(),
        });
    }
    Ok(ErrorRate {
        corpus: total_edits as f64 / total_ref as f64,
        mean: ratio_sum / pairs.len() as f64,
    })
}

/// Fraction of pairs where hypothesis and reference differ.
pub fn word_error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "word error rate over zero pairs".into() });
    }
    let wrong = pairs.iter().filter(|(h, r)| h != r).count();
    Ok(wrong as f64 / pairs.len() as f64)
}

/// Exact-match accuracy in percent: `(1 - WER) * 100`.
pub fn accuracy<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    Ok((1.0 - word_error_rate(pairs)?) * 100.0)
}

/// F-score of one candidate/reference pair from the quasi-LCS.
pub fn fscore<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let ed = edit_distance(candidate, reference);
    let lcs = (candidate.len() + reference.len()) as f64 / 2.0 - ed as f64 / 2.0;
    if lcs <= 0.0 || candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let recall = lcs / reference.len() as f64;
    let precision = lcs / candidate.len() as f64;
    2.0 * recall * precision / (recall + precision)
}

/// Mean F-score over a corpus.
pub fn mean_fscore<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "mean F-score over zero pairs".into() });
    }
    let s: f64 = pairs.iter().map(|(h, r)| fscore(h, r)).sum();
    Ok(s / pairs.len() as f64)
}

/// Mean Levenshtein distance over a corpus.
pub fn mean_levenshtein<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "mean edit distance over zero pairs".into() });
    }
    let s: usize = pairs.iter().map(|(h, r)| edit_distance(h, r)).sum();
    Ok(s as f64 / pairs.len() as f64)
}

/// Every metric over one decoded corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub word_error_rate: f64,
    pub accuracy: f64,
    pub symbol_error_rate_corpus: f64,
    pub symbol_error_rate_mean: f64,
    pub mean_fscore: f64,
    pub mean_levenshtein: f64,
}

pub fn evaluate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<EvalReport> {
    let wer = word_error_rate(pairs)?;
    let er = symbol_error_rate(pairs)?;
    Ok(EvalReport {
        pairs: pairs.len(),
        word_error_rate: wer,
        accuracy: (1.0 - wer) * 100.0,
        symbol_error_rate_corpus: er.corpus,
        symbol_error_rate_mean: er.mean,
        mean_fscore: mean_fscore(pairs)?,
        mean_levenshtein: mean_levenshtein(pairs)?,
    })
}

pub fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}
