//! Alignment machinery: bilinear scores, the alignment distribution, soft
//! context vectors, per-alignment output laws, exact marginalization over
//! all alignments by dynamic programming, enumeration oracles, and a
//! REINFORCE surrogate for sampled-alignment training.
//!
//! Everything is computed in log space; per-step mixtures collapse through
//! `logsumexp` so products over output steps never underflow.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId};

/// Enumeration ceiling for the brute-force oracles: |x|^|y| alignments.
pub const MAX_ENUMERATED_ALIGNMENTS: usize = 1_000_000;

/// Raw bilinear scores, one row per output step, one column per source
/// position. Masked source columns hold the -inf sentinel.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentScores {
    pub node: NodeId,
    pub steps: usize,
    pub src_len: usize,
}

/// Row-stochastic matrix over source positions; masked columns carry zero
/// mass.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentDistribution {
    pub node: NodeId,
    pub steps: usize,
    pub src_len: usize,
}

/// One sampled alignment: a source position per output step plus the log
/// probability each draw had under its row of the alignment distribution.
/// Positions are zero-based indices below the source length.
#[derive(Debug, Clone)]
pub struct AlignmentSample {
    pub positions: Vec<usize>,
    pub step_log_probs: Vec<f64>,
}

impl AlignmentSample {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }
}

/// Scores e_ij = h_dec_i' T h_enc_j for every (step, source) pair, with
/// masked source positions forced to -inf so they can never win any mass.
pub fn attention_scores(
    g: &mut Graph<'_>,
    h_dec: NodeId,
    h_enc: NodeId,
    t: NodeId,
    masked: Option<&[bool]>,
) -> Result<AlignmentScores> {
    let steps = g.shape(h_dec)[0];
    let src_len = g.shape(h_enc)[0];
    let proj = g.matmul(h_dec, t)?;
    let mut scores = g.matmul_tb(proj, h_enc)?;
    if let Some(m) = masked {
        if m.len() != src_len {
            return Err(Error::InvalidArgument {
                op: "attention_scores",
                what: format!("mask length {} does not cover {src_len} source positions", m.len()),
            });
        }
        if m.iter().any(|&b| b) {
            let row: Vec<f64> =
                m.iter().map(|&b| if b { f64::NEG_INFINITY } else { 0.0 }).collect();
            let mask_row = g.constant_vec(row);
            scores = g.add_row_broadcast(scores, mask_row)?;
        }
    }
    Ok(AlignmentScores { node: scores, steps, src_len })
}

fn check_rows_not_fully_masked(g: &Graph<'_>, scores: &AlignmentScores) -> Result<()> {
    let v = g.value(scores.node);
    for i in 0..scores.steps {
        let row = &v[i * scores.src_len..(i + 1) * scores.src_len];
        if row.iter().all(|&x| x == f64::NEG_INFINITY) {
            return Err(Error::DegenerateAlignment { step: i });
        }
    }
    Ok(())
}

/// Row-wise softmax of the scores. The same matrix serves as soft attention
/// weights and as the hard model's mixture coefficients.
pub fn alignment_distribution(
    g: &mut Graph<'_>,
    scores: &AlignmentScores,
) -> Result<AlignmentDistribution> {
    check_rows_not_fully_masked(g, scores)?;
    let node = g.softmax_rows(scores.node)?;
    Ok(AlignmentDistribution { node, steps: scores.steps, src_len: scores.src_len })
}

/// Row-wise log-softmax of the scores, for likelihood work in log space.
pub fn log_alignment_distribution(g: &mut Graph<'_>, scores: &AlignmentScores) -> Result<NodeId> {
    check_rows_not_fully_masked(g, scores)?;
    g.log_softmax_rows(scores.node)
}

/// Expected encoder state under one alignment row: c = sum_j alpha_j h_enc_j.
pub fn soft_context(g: &mut Graph<'_>, alpha_row: NodeId, h_enc: NodeId) -> Result<NodeId> {
    g.tmatvec(h_enc, alpha_row)
}

/// Log-distribution over the output alphabet for one (step, source) pair:
/// log_softmax(W tanh(S (h_dec ⊕ h_enc_j))). Neither projection has a bias.
pub fn output_logits_given_alignment(
    g: &mut Graph<'_>,
    h_dec_i: NodeId,
    h_enc_j: NodeId,
    s: NodeId,
    w: NodeId,
) -> Result<NodeId> {
    let u = g.concat(&[h_dec_i, h_enc_j])?;
    let pre = g.matvec(s, u)?;
    let hidden = g.tanh(pre)?;
    let logits = g.matvec(w, hidden)?;
    g.log_softmax_rows(logits)
}

/// One output step of the marginalized likelihood: the log alignment row
/// and, aligned with it, log p(y_i | a_i = j, y_<i, x) for every source j.
#[derive(Debug, Clone, Copy)]
pub struct StepLikelihood {
    pub log_alpha: NodeId,
    pub log_p: NodeId,
}

fn fold_add(g: &mut Graph<'_>, ids: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = ids.split_first().expect("fold_add over nonempty list");
    let mut acc = first;
    for &id in rest {
        acc = g.add(acc, id)?;
    }
    Ok(acc)
}

fn check_steps(g: &Graph<'_>, steps: &[StepLikelihood], op: &'static str) -> Result<usize> {
    if steps.is_empty() {
        return Err(Error::EmptyInput { op });
    }
    let src_len = g.shape(steps[0].log_alpha)[0];
    for (i, st) in steps.iter().enumerate() {
        if g.shape(st.log_alpha) != [src_len] || g.shape(st.log_p) != [src_len] {
            return Err(Error::InvalidArgument {
                op,
                what: format!(
                    "step {i} vectors {:?}/{:?} do not match source length {src_len}",
                    g.shape(st.log_alpha),
                    g.shape(st.log_p)
                ),
            });
        }
        if g.value(st.log_alpha).iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(Error::DegenerateAlignment { step: i });
        }
    }
    Ok(src_len)
}

/// Exact log p(y|x) marginalized over all |x|^|y| alignments:
/// sum_i logsumexp_j (log alpha_j(i) + log p(y_i | a_i = j)). Linear in
/// |x|·|y| because the alignment choice factorizes per step once the
/// decoder state depends only on the output prefix.
pub fn hard_marginal(g: &mut Graph<'_>, steps: &[StepLikelihood]) -> Result<NodeId> {
    check_steps(g, steps, "hard_marginal")?;
    let mut per_step = Vec::with_capacity(steps.len());
    for st in steps {
        let joint = g.add(st.log_alpha, st.log_p)?;
        per_step.push(g.logsumexp(joint)?);
    }
    fold_add(g, &per_step)
}

/// Result of an explicit enumeration over all alignments.
#[derive(Debug, Clone, Copy)]
pub struct Enumeration {
    pub node: NodeId,
    pub alignments: usize,
}

fn enumeration_size(src_len: usize, steps: usize) -> Result<usize> {
    src_len
        .checked_pow(steps as u32)
        .filter(|&n| n <= MAX_ENUMERATED_ALIGNMENTS)
        .ok_or(Error::EnumerationTooLarge {
            source_len: src_len,
            target_len: steps,
            max: MAX_ENUMERATED_ALIGNMENTS as u64,
        })
}

fn for_each_alignment(src_len: usize, steps: usize, mut visit: impl FnMut(&[usize]) -> Result<()>) -> Result<usize> {
    let mut a = vec![0usize; steps];
    let mut count = 0usize;
    loop {
        visit(&a)?;
        count += 1;
        let mut pos = steps;
        loop {
            if pos == 0 {
                return Ok(count);
            }
            pos -= 1;
            a[pos] += 1;
            if a[pos] < src_len {
                break;
            }
            a[pos] = 0;
        }
    }
}

/// log p(y|x) by summing every alignment's joint term explicitly. Test
/// oracle for the dynamic program; refuses above the enumeration ceiling.
pub fn brute_force_log_likelihood(
    g: &mut Graph<'_>,
    steps: &[StepLikelihood],
) -> Result<Enumeration> {
    let src_len = check_steps(g, steps, "brute_force_log_likelihood")?;
    enumeration_size(src_len, steps.len())?;
    let joints: Vec<NodeId> = steps
        .iter()
        .map(|st| g.add(st.log_alpha, st.log_p))
        .collect::<Result<_>>()?;
    let mut terms = Vec::new();
    let count = for_each_alignment(src_len, steps.len(), |a| {
        let parts: Vec<NodeId> =
            a.iter().zip(&joints).map(|(&j, &t)| g.index(t, j)).collect::<Result<_>>()?;
        terms.push(fold_add(g, &parts)?);
        Ok(())
    })?;
    let all = g.concat(&terms)?;
    let node = g.logsumexp(all)?;
    Ok(Enumeration { node, alignments: count })
}

/// The Jensen lower bound E_alpha[log p(y|x,a)] enumerated exactly:
/// sum_a p(a|x) log p(y|x,a). Oracle for the REINFORCE gradient.
pub fn enumerated_jensen_bound(
    g: &mut Graph<'_>,
    steps: &[StepLikelihood],
) -> Result<Enumeration> {
    let src_len = check_steps(g, steps, "enumerated_jensen_bound")?;
    enumeration_size(src_len, steps.len())?;
    let mut terms = Vec::new();
    let count = for_each_alignment(src_len, steps.len(), |a| {
        let score_parts: Vec<NodeId> = a
            .iter()
            .zip(steps)
            .map(|(&j, st)| g.index(st.log_alpha, j))
            .collect::<Result<_>>()?;
        let log_weight = fold_add(g, &score_parts)?;
        let weight = g.exp(log_weight)?;
        let reward_parts: Vec<NodeId> = a
            .iter()
            .zip(steps)
            .map(|(&j, st)| g.index(st.log_p, j))
            .collect::<Result<_>>()?;
        let reward = fold_add(g, &reward_parts)?;
        terms.push(g.mul(weight, reward)?);
        Ok(())
    })?;
    let node = fold_add(g, &terms)?;
    Ok(Enumeration { node, alignments: count })
}

/// Draws one source position per output step, independently, from the rows
/// of the alignment distribution.
pub fn sample_alignment(
    g: &Graph<'_>,
    alpha: &AlignmentDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<AlignmentSample> {
    let v = g.value(alpha.node);
    let mut positions = Vec::with_capacity(alpha.steps);
    let mut step_log_probs = Vec::with_capacity(alpha.steps);
    for i in 0..alpha.steps {
        let row = &v[i * alpha.src_len..(i + 1) * alpha.src_len];
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut chosen = None;
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                cum += p;
                chosen = Some(j);
                if u < cum {
                    break;
                }
            }
        }
        let j = chosen.ok_or(Error::DegenerateAlignment { step: i })?;
        positions.push(j);
        step_log_probs.push(row[j].ln());
    }
    Ok(AlignmentSample { positions, step_log_probs })
}

/// Exponential moving average of the sampled reward, used to centre the
/// score-function term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MovingBaseline {
    pub value: f64,
}

impl MovingBaseline {
    pub fn new() -> Self {
        MovingBaseline { value: 0.0 }
    }

    /// b <- 0.9 b + 0.1 mean_reward, applied after the batch that used b.
    pub fn update(&mut self, mean_reward: f64) {
        self.value = 0.9 * self.value + 0.1 * mean_reward;
    }
}

impl Default for MovingBaseline {
    fn default() -> Self {
        Self::new()
    }
}

/// Surrogate loss and bookkeeping from one REINFORCE evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ReinforceOutcome {
    pub surrogate: NodeId,
    pub mean_reward: f64,
}

/// Sampled surrogate whose gradient estimates the Jensen-bound gradient:
/// -(1/k) sum_s [ log p(y|x,a_s) + (log p(y|x,a_s) - b) · log p(a_s|x) ]
/// with the centring coefficient treated as a constant. The caller updates
/// the baseline with the returned mean reward after the step.
pub fn reinforce_objective(
    g: &mut Graph<'_>,
    steps: &[StepLikelihood],
    samples: &[AlignmentSample],
    baseline: f64,
) -> Result<ReinforceOutcome> {
    let src_len = check_steps(g, steps, "reinforce_objective")?;
    if samples.is_empty() {
        return Err(Error::EmptyInput { op: "reinforce_objective" });
    }
    let mut terms = Vec::with_capacity(samples.len());
    let mut reward_sum = 0.0;
    for sample in samples {
        if sample.positions.len() != steps.len() {
            return Err(Error::InvalidArgument {
                op: "reinforce_objective",
                what: format!(
                    "sample has {} positions for {} output steps",
                    sample.positions.len(),
                    steps.len()
                ),
            });
        }
        if let Some(&bad) = sample.positions.iter().find(|&&j| j >= src_len) {
            return Err(Error::IndexOutOfRange {
                op: "reinforce_objective",
                index: bad,
                bound: src_len,
            });
        }
        let reward_parts: Vec<NodeId> = sample
            .positions
            .iter()
            .zip(steps)
            .map(|(&j, st)| g.index(st.log_p, j))
            .collect::<Result<_>>()?;
        let reward = fold_add(g, &reward_parts)?;
        let score_parts: Vec<NodeId> = sample
            .positions
            .iter()
            .zip(steps)
            .map(|(&j, st)| g.index(st.log_alpha, j))
            .collect::<Result<_>>()?;
        let score = fold_add(g, &score_parts)?;
        let reward_value = g.scalar_value(reward)?;
        reward_sum += reward_value;
        let centred_score = g.scale(score, reward_value - baseline)?;
        terms.push(g.add(reward, centred_score)?);
    }
    let total = fold_add(g, &terms)?;
    let surrogate = g.scale(total, -1.0 / samples.len() as f64)?;
    Ok(ReinforceOutcome { surrogate, mean_reward: reward_sum / samples.len() as f64 })
}
