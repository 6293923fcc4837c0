//! The four transducer architectures behind one likelihood interface:
//! soft attention and hard (alignment-marginalized) attention, each with an
//! optional input-feeding decoder. Hard models evaluate by exact dynamic
//! programming; a REINFORCE flag switches their training loss to a sampled
//! surrogate without touching the evaluation path.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    hard_marginal, reinforce_objective, sample_alignment, AlignmentDistribution,
    AlignmentSample, StepLikelihood,
};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nets::{
    decoder_step, encode, init_matrix, DecState, DecoderNodes, DecoderParams, Dropout,
    EncoderNodes, EncoderParams,
};
use crate::tensor::{Graph, NodeId, Tensor};

/// The four attention architectures: soft or hard mixing, with or without
/// an input-fed decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureKind {
    SoftInputFed,
    HardInputFed,
    Soft,
    Hard,
}

impl ArchitectureKind {
    /// Hard architectures marginalize over alignments; soft ones mix
    /// encoder states before the output law.
    pub fn is_hard(self) -> bool {
        matches!(self, ArchitectureKind::HardInputFed | ArchitectureKind::Hard)
    }

    /// Input-fed decoders consume the previous step's output-law hidden
    /// vector alongside the previous symbol.
    pub fn input_fed(self) -> bool {
        matches!(self, ArchitectureKind::SoftInputFed | ArchitectureKind::HardInputFed)
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArchitectureKind::SoftInputFed => "soft-if",
            ArchitectureKind::HardInputFed => "hard-if",
            ArchitectureKind::Soft => "soft",
            ArchitectureKind::Hard => "hard",
        };
        f.write_str(s)
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft-if" => Ok(ArchitectureKind::SoftInputFed),
            "hard-if" => Ok(ArchitectureKind::HardInputFed),
            "soft" => Ok(ArchitectureKind::Soft),
            "hard" => Ok(ArchitectureKind::Hard),
            other => Err(Error::Config {
                what: format!("unknown architecture '{other}' (soft-if|hard-if|soft|hard)"),
            }),
        }
    }
}

/// Model hyperparameters. `d_h` counts one encoder direction, so encoder
/// rows are 2 d_h wide; `d_s` is the output-law hidden width requested for
/// the uncontrolled case (the soft input-fed model shrinks it at build time
/// to keep parameter counts level unless `uncontrolled` is set).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchitectureKind,
    pub d_e: usize,
    pub d_h: usize,
    pub enc_layers: usize,
    pub d_dec: usize,
    pub dec_layers: usize,
    pub d_s: usize,
    pub dropout: f64,
    pub reinforce: bool,
    pub samples: usize,
    pub uncontrolled: bool,
}

impl ModelConfig {
    pub fn new(arch: ArchitectureKind, d_e: usize, d_h: usize, enc_layers: usize, d_dec: usize, dec_layers: usize, dropout: f64) -> Self {
        ModelConfig {
            arch,
            d_e,
            d_h,
            enc_layers,
            d_dec,
            dec_layers,
            d_s: 3 * d_h,
            dropout,
            reinforce: false,
            samples: 2,
            uncontrolled: false,
        }
    }

    pub fn small(arch: ArchitectureKind) -> Self {
        ModelConfig::new(arch, 100, 200, 1, 200, 1, 0.2)
    }

    pub fn large(arch: ArchitectureKind) -> Self {
        ModelConfig::new(arch, 200, 400, 2, 400, 1, 0.4)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("enc_layers", self.enc_layers),
            ("d_dec", self.d_dec),
            ("dec_layers", self.dec_layers),
            ("d_s", self.d_s),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config { what: format!("{name} must be positive") });
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config {
                what: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        if self.reinforce {
            if !self.arch.is_hard() {
                return Err(Error::Config {
                    what: "REINFORCE applies only to hard architectures".into(),
                });
            }
            if self.samples == 0 {
                return Err(Error::Config {
                    what: "REINFORCE needs at least one sample per step".into(),
                });
            }
        }
        if self.uncontrolled && self.arch != ArchitectureKind::SoftInputFed {
            return Err(Error::Config {
                what: "the uncontrolled flag only modifies the soft input-fed model".into(),
            });
        }
        Ok(())
    }

    /// Output-law hidden width actually built. The controlled soft
    /// input-fed model solves for the width that spends the same parameter
    /// budget as the plain soft model once the merge map is added.
    pub fn effective_d_s(&self, tgt_vocab: usize) -> Result<usize> {
        if self.arch != ArchitectureKind::SoftInputFed || self.uncontrolled {
            return Ok(self.d_s);
        }
        let budget = self.d_s * (self.d_dec + 2 * self.d_h) + tgt_vocab * self.d_s;
        let merge_fixed = self.d_e * self.d_e;
        let per_unit = self.d_dec + 2 * self.d_h + tgt_vocab + self.d_e;
        let reduced = budget.saturating_sub(merge_fixed) / per_unit;
        if reduced == 0 {
            return Err(Error::Config {
                what: format!(
                    "parameter budget too small to size the merged output layer \
                     (budget {budget}, merge overhead {merge_fixed})"
                ),
            });
        }
        Ok(reduced)
    }
}

/// A built transducer: configuration, vocabulary sizes, and every
/// parameter tensor. The named-parameter walk (`visit_params`) is the
/// single ordering authority for optimizers, checkpoints, and graph
/// registration.
#[derive(Debug, Clone)]
pub struct TransducerModel {
    pub config: ModelConfig,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Output-law hidden width after parameter control.
    pub d_s: usize,
    pub enc: EncoderParams,
    pub dec: DecoderParams,
    pub t: Tensor,
    pub s: Tensor,
    pub w: Tensor,
}

/// Deterministically initialized model; same config and seed give the same
/// parameters bit for bit, and architectures sharing a parameter layout
/// (plain soft and plain hard) draw identical values.
pub fn build_model(
    config: ModelConfig,
    src_vocab_size: usize,
    tgt_vocab_size: usize,
    seed: u64,
) -> Result<TransducerModel> {
    config.validate()?;
    if src_vocab_size == 0 || tgt_vocab_size == 0 {
        return Err(Error::Config { what: "vocabularies must be non-empty".into() });
    }
    let d_s = config.effective_d_s(tgt_vocab_size)?;
    let mut rng = crate::rng::stream(seed, "init", &[]);
    let enc = EncoderParams::init(src_vocab_size, config.d_e, config.d_h, config.enc_layers, &mut rng);
    let merge_d_s = config.arch.input_fed().then_some(d_s);
    let dec = DecoderParams::init(
        tgt_vocab_size,
        config.d_e,
        config.d_dec,
        config.dec_layers,
        merge_d_s,
        &mut rng,
    );
    let t = init_matrix(config.d_dec, 2 * config.d_h, &mut rng);
    let s = init_matrix(d_s, config.d_dec + 2 * config.d_h, &mut rng);
    let w = init_matrix(tgt_vocab_size, d_s, &mut rng);
    Ok(TransducerModel { config, src_vocab_size, tgt_vocab_size, d_s, enc, dec, t, s, w })
}

/// Registered graph handles for one evaluation of the model, including the
/// column split of S that lets encoder-side projections hoist out of the
/// step loop.
pub struct ModelNodes {
    pub enc: EncoderNodes,
    pub dec: DecoderNodes,
    pub t: NodeId,
    pub s: NodeId,
    pub w: NodeId,
    pub s_dec: NodeId,
    pub s_enc: NodeId,
}

/// Per-sequence encoder products: the encoder matrix and, for hard models,
/// the hoisted projection A = H_enc S_encᵀ reused by every output step.
pub struct SrcNodes {
    pub h_enc: NodeId,
    pub projected: Option<NodeId>,
    pub src_len: usize,
}

/// Decoder recurrence plus the input-feeding carry.
pub struct StepState {
    pub dec: DecState,
    pub feed: Option<NodeId>,
}

/// Everything one decoder step exposes: the raw hidden state, alignment
/// quantities, and the architecture's output distribution for this step
/// (per-alignment rows for hard models, a single mixed law for soft ones).
pub struct StepOutput {
    pub h_dec: NodeId,
    pub scores: NodeId,
    pub log_alpha: NodeId,
    pub alpha: NodeId,
    pub hard_log_rows: Option<NodeId>,
    pub soft_log_dist: Option<NodeId>,
}

/// Teacher-forced pass over a full target: per-step likelihood ingredients
/// in output order.
pub struct TeacherForced {
    pub steps: Vec<StepLikelihood>,
    pub soft_terms: Vec<NodeId>,
    pub alpha_rows: Vec<NodeId>,
    pub dec_hidden: Vec<NodeId>,
    pub src_len: usize,
}

/// Training objective handle; `mean_reward` is present on REINFORCE losses
/// so the caller can update its moving baseline after the step.
pub struct LossOutcome {
    pub loss: NodeId,
    pub mean_reward: Option<f64>,
}

/// How the training loss is assembled for hard models.
pub enum LossMode<'r> {
    Exact,
    Reinforce { rng: &'r mut ChaCha8Rng, baseline: f64 },
}

impl TransducerModel {
    /// Fixed parameter walk: encoder, decoder, bilinear map, output law.
    pub fn visit_params<'s>(&'s self, f: &mut impl FnMut(String, &'s Tensor)) {
        self.enc.for_each(f);
        self.dec.for_each(f);
        f("attn.t".into(), &self.t);
        f("out.s".into(), &self.s);
        f("out.w".into(), &self.w);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.enc.for_each_mut(f);
        self.dec.for_each_mut(f);
        f("attn.t".into(), &mut self.t);
        f("out.s".into(), &mut self.s);
        f("out.w".into(), &mut self.w);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn param_entries(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.shape().to_vec())));
        out
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a>, train: bool) -> Result<ModelNodes> {
        let mut key = 0;
        let enc = self.enc.register(g, &mut key, train);
        let dec = self.dec.register(g, &mut key, train);
        let mut reg = |t: &'a Tensor, key: &mut usize| {
            let id = if train { g.param(t, *key) } else { g.param_frozen(t, *key) };
            *key += 1;
            id
        };
        let t = reg(&self.t, &mut key);
        let s = reg(&self.s, &mut key);
        let w = reg(&self.w, &mut key);
        let s_dec = g.slice_cols(s, 0, self.config.d_dec)?;
        let s_enc = g.slice_cols(s, self.config.d_dec, 2 * self.config.d_h)?;
        Ok(ModelNodes { enc, dec, t, s, w, s_dec, s_enc })
    }

    /// Encodes a source sequence and hoists the encoder-side half of the
    /// output law for hard models.
    pub fn encode_source(
        &self,
        g: &mut Graph<'_>,
        nodes: &ModelNodes,
        x: &[usize],
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<SrcNodes> {
        let h_enc = encode(g, &nodes.enc, x, dropout)?;
        let projected = if self.config.arch.is_hard() {
            Some(g.matmul_tb(h_enc, nodes.s_enc)?)
        } else {
            None
        };
        Ok(SrcNodes { h_enc, projected, src_len: x.len() })
    }

    pub fn init_step_state(&self, g: &mut Graph<'_>, nodes: &ModelNodes) -> StepState {
        let dec = DecState::zero(g, &nodes.dec);
        let feed = self
            .config
            .arch
            .input_fed()
            .then(|| g.constant_vec(vec![0.0; self.d_s]));
        StepState { dec, feed }
    }

    /// One output step: advance the decoder on the previous symbol, score
    /// every source position, and produce this step's output distribution.
    pub fn advance(
        &self,
        g: &mut Graph<'_>,
        nodes: &ModelNodes,
        src: &SrcNodes,
        y_prev: usize,
        state: &StepState,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(StepOutput, StepState)> {
        let (h, dec) = decoder_step(g, &nodes.dec, y_prev, &state.dec, state.feed, dropout)?;
        let proj = g.tmatvec(nodes.t, h)?;
        let scores = g.matvec(src.h_enc, proj)?;
        let log_alpha = g.log_softmax_rows(scores)?;
        let alpha = g.softmax_rows(scores)?;
        let dec_half = g.matvec(nodes.s_dec, h)?;

        let mut hard_log_rows = None;
        let mut soft_log_dist = None;
        let mut soft_hidden = None;
        if self.config.arch.is_hard() {
            let pre = g.add_row_broadcast(src.projected.expect("hard model projects"), dec_half)?;
            let hidden = g.tanh(pre)?;
            let logits = g.matmul_tb(hidden, nodes.w)?;
            hard_log_rows = Some(g.log_softmax_rows(logits)?);
        }
        if !self.config.arch.is_hard() || self.config.arch.input_fed() {
            // the soft law's hidden vector doubles as the fed carry
            let context = g.tmatvec(src.h_enc, alpha)?;
            let enc_half = g.matvec(nodes.s_enc, context)?;
            let pre = g.add(dec_half, enc_half)?;
            let hidden = g.tanh(pre)?;
            soft_hidden = Some(hidden);
            if !self.config.arch.is_hard() {
                let logits = g.matvec(nodes.w, hidden)?;
                soft_log_dist = Some(g.log_softmax_rows(logits)?);
            }
        }
        let feed = self.config.arch.input_fed().then(|| soft_hidden.expect("input-fed computes the carry"));
        Ok((
            StepOutput { h_dec: h, scores, log_alpha, alpha, hard_log_rows, soft_log_dist },
            StepState { dec, feed },
        ))
    }

    fn validate_target(&self, y: &[usize]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::EmptyInput { op: "sequence_log_likelihood" });
        }
        if let Some(&bad) = y.iter().find(|&&i| i >= self.tgt_vocab_size) {
            return Err(Error::IndexOutOfRange {
                op: "sequence_log_likelihood",
                index: bad,
                bound: self.tgt_vocab_size,
            });
        }
        if *y.last().expect("non-empty") != EOS {
            return Err(Error::InvalidArgument {
                op: "sequence_log_likelihood",
                what: "target must end with the EOS symbol".into(),
            });
        }
        Ok(())
    }

    /// Runs the decoder over the gold target, collecting each step's
    /// likelihood ingredients.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<'_>,
        nodes: &ModelNodes,
        x: &[usize],
        y: &[usize],
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<TeacherForced> {
        self.validate_target(y)?;
        let src = self.encode_source(g, nodes, x, dropout)?;
        let mut state = self.init_step_state(g, nodes);
        let mut steps = Vec::with_capacity(y.len());
        let mut soft_terms = Vec::with_capacity(y.len());
        let mut alpha_rows = Vec::with_capacity(y.len());
        let mut dec_hidden = Vec::with_capacity(y.len());
        let mut y_prev = BOS;
        for &y_i in y {
            let (out, next) = self.advance(g, nodes, &src, y_prev, &state, dropout)?;
            if let Some(rows) = out.hard_log_rows {
                let log_p = g.col(rows, y_i)?;
                steps.push(StepLikelihood { log_alpha: out.log_alpha, log_p });
            } else {
                let dist = out.soft_log_dist.expect("soft model emits a mixed law");
                soft_terms.push(g.index(dist, y_i)?);
            }
            alpha_rows.push(out.alpha);
            dec_hidden.push(out.h_dec);
            state = next;
            y_prev = y_i;
        }
        Ok(TeacherForced { steps, soft_terms, alpha_rows, dec_hidden, src_len: x.len() })
    }

    /// log p(y|x) as a graph node: exact marginalization for hard models,
    /// the product of mixed-law conditionals for soft ones.
    pub fn log_likelihood_node(
        &self,
        g: &mut Graph<'_>,
        nodes: &ModelNodes,
        x: &[usize],
        y: &[usize],
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<NodeId> {
        let forced = self.teacher_forced(g, nodes, x, y, dropout)?;
        if self.config.arch.is_hard() {
            hard_marginal(g, &forced.steps)
        } else {
            let (&first, rest) = forced.soft_terms.split_first().expect("\u{2265} one step");
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        }
    }

    /// Per-sequence training loss. Exact mode is the negated log
    /// likelihood; REINFORCE mode samples alignments and returns the
    /// surrogate whose gradient estimates the Jensen-bound gradient.
    pub fn loss_node(
        &self,
        g: &mut Graph<'_>,
        nodes: &ModelNodes,
        x: &[usize],
        y: &[usize],
        dropout: &mut Option<Dropout<'_>>,
        mode: LossMode<'_>,
    ) -> Result<LossOutcome> {
        match mode {
            LossMode::Exact => {
                let ll = self.log_likelihood_node(g, nodes, x, y, dropout)?;
                let loss = g.scale(ll, -1.0)?;
                Ok(LossOutcome { loss, mean_reward: None })
            }
            LossMode::Reinforce { rng, baseline } => {
                if !self.config.arch.is_hard() {
                    return Err(Error::Config {
                        what: "REINFORCE applies only to hard architectures".into(),
                    });
                }
                let forced = self.teacher_forced(g, nodes, x, y, dropout)?;
                let alpha_matrix = g.stack_rows(&forced.alpha_rows)?;
                let alpha = AlignmentDistribution {
                    node: alpha_matrix,
                    steps: forced.steps.len(),
                    src_len: forced.src_len,
                };
                let samples: Vec<AlignmentSample> = (0..self.config.samples)
                    .map(|_| sample_alignment(g, &alpha, rng))
                    .collect::<Result<_>>()?;
                let out = reinforce_objective(g, &forced.steps, &samples, baseline)?;
                Ok(LossOutcome { loss: out.surrogate, mean_reward: Some(out.mean_reward) })
            }
        }
    }

    /// Deterministic evaluation likelihood (never samples): exact dynamic
    /// programming for hard models regardless of the training flag.
    pub fn sequence_log_likelihood(&self, x: &[usize], y: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g, false)?;
        let ll = self.log_likelihood_node(&mut g, &nodes, x, y, &mut None)?;
        g.scalar_value(ll)
    }

    /// Likelihood by explicit enumeration over all |x|^|y| alignments;
    /// oracle for the dynamic program (soft models reuse the exact path,
    /// where no marginalization happens).
    pub fn enumerated_log_likelihood(&self, x: &[usize], y: &[usize]) -> Result<f64> {
        if !self.config.arch.is_hard() {
            return self.sequence_log_likelihood(x, y);
        }
        let mut g = Graph::new();
        let nodes = self.register(&mut g, false)?;
        let forced = self.teacher_forced(&mut g, &nodes, x, y, &mut None)?;
        let bf = crate::align::brute_force_log_likelihood(&mut g, &forced.steps)?;
        g.scalar_value(bf.node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny(arch: ArchitectureKind) -> ModelConfig {
        ModelConfig::new(arch, 3, 2, 1, 2, 1, 0.0)
    }

    #[test]
    fn presets_match_published_settings() {
        let s = ModelConfig::small(ArchitectureKind::Hard);
        assert_eq!((s.d_e, s.d_h, s.enc_layers, s.d_dec, s.dec_layers), (100, 200, 1, 200, 1));
        assert_eq!(s.dropout, 0.2);
        assert_eq!(s.d_s, 600);
        let l = ModelConfig::large(ArchitectureKind::Soft);
        assert_eq!((l.d_e, l.d_h, l.enc_layers, l.d_dec, l.dec_layers), (200, 400, 2, 400, 1));
        assert_eq!(l.dropout, 0.4);
    }

    #[test]
    fn config_contracts_are_enforced() {
        let mut c = tiny(ArchitectureKind::Soft);
        c.reinforce = true;
        assert!(c.validate().is_err(), "REINFORCE needs a hard model");
        let mut c = tiny(ArchitectureKind::Hard);
        c.reinforce = true;
        c.samples = 0;
        assert!(c.validate().is_err(), "k must be positive");
        let mut c = tiny(ArchitectureKind::Hard);
        c.uncontrolled = true;
        assert!(c.validate().is_err(), "uncontrolled only modifies the soft input-fed model");
        let mut c = tiny(ArchitectureKind::Hard);
        c.d_h = 0;
        assert!(c.validate().is_err());
        assert!(build_model(tiny(ArchitectureKind::Hard), 0, 5, 1).is_err());
    }

    #[test]
    fn plain_architectures_share_parameters_bitwise() {
        let soft = build_model(tiny(ArchitectureKind::Soft), 5, 6, 42).unwrap();
        let hard = build_model(tiny(ArchitectureKind::Hard), 5, 6, 42).unwrap();
        let collect = |m: &TransducerModel| {
            let mut v: Vec<(String, Vec<f64>)> = Vec::new();
            m.visit_params(&mut |n, t| v.push((n, t.data().to_vec())));
            v
        };
        assert_eq!(collect(&soft), collect(&hard));
    }

    #[test]
    fn same_seed_rebuild_is_identical_and_seeds_separate() {
        let a = build_model(tiny(ArchitectureKind::HardInputFed), 5, 6, 7).unwrap();
        let b = build_model(tiny(ArchitectureKind::HardInputFed), 5, 6, 7).unwrap();
        let c = build_model(tiny(ArchitectureKind::HardInputFed), 5, 6, 8).unwrap();
        let dump = |m: &TransducerModel| {
            let mut v = Vec::new();
            m.visit_params(&mut |n, t| v.push((n, t.data().to_vec())));
            v
        };
        assert_eq!(dump(&a), dump(&b));
        assert_ne!(dump(&a), dump(&c));
    }

    #[test]
    fn controlled_sizing_matches_plain_soft_budget() {
        let v_tgt = 30;
        let plain = build_model(ModelConfig::small(ArchitectureKind::Soft), 40, v_tgt, 1).unwrap();
        let fed = build_model(ModelConfig::small(ArchitectureKind::SoftInputFed), 40, v_tgt, 1).unwrap();
        let (p, f) = (plain.parameter_count() as f64, fed.parameter_count() as f64);
        assert!((p - f).abs() / p < 0.01, "controlled {f} vs plain {p}");
        assert!(fed.d_s < plain.d_s, "control must shrink the output layer");

        let mut unc_cfg = ModelConfig::small(ArchitectureKind::SoftInputFed);
        unc_cfg.uncontrolled = true;
        let unc = build_model(unc_cfg, 40, v_tgt, 1).unwrap();
        assert_eq!(unc.d_s, plain.d_s);
        assert!(unc.parameter_count() > plain.parameter_count());

        // registries agree on names; only d_s-sized tensors change shape
        let entries = |m: &TransducerModel| m.param_entries();
        let (ce, ue) = (entries(&fed), entries(&unc));
        assert_eq!(
            ce.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            ue.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()
        );
        for ((name, cs), (_, us)) in ce.iter().zip(&ue) {
            let depends_on_d_s = matches!(name.as_str(), "out.s" | "out.w" | "dec.merge");
            assert_eq!(cs != us, depends_on_d_s, "{name}: {cs:?} vs {us:?}");
        }
    }

    #[test]
    fn tiny_parameter_count_matches_hand_tally() {
        let m = build_model(ModelConfig::new(ArchitectureKind::Hard, 2, 2, 1, 2, 1, 0.0), 3, 3, 1)
            .unwrap();
        // per LSTM cell: 4 gates x (2x2 input + 2x2 recurrent + 2 bias) = 40
        let cell = 4 * (4 + 4 + 2);
        let want = 3 * 2          // source embedding
            + 2 * cell            // bidirectional encoder
            + 3 * 2               // target embedding
            + cell                // decoder
            + 2 * 4               // bilinear map, d_dec x 2 d_h
            + 6 * 6               // S: d_s x (d_dec + 2 d_h)
            + 3 * 6;              // W: vocab x d_s
        assert_eq!(m.parameter_count(), want);
        assert_eq!(want, 194);
    }

    #[test]
    fn registry_names_are_unique() {
        let m = build_model(tiny(ArchitectureKind::SoftInputFed), 5, 6, 3).unwrap();
        let names: Vec<String> = m.param_entries().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.contains(&"dec.merge".to_string()));
    }

    fn archs() -> [ArchitectureKind; 4] {
        [
            ArchitectureKind::SoftInputFed,
            ArchitectureKind::HardInputFed,
            ArchitectureKind::Soft,
            ArchitectureKind::Hard,
        ]
    }

    #[test]
    fn log_likelihoods_are_nonpositive_for_all_architectures() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for arch in archs() {
            let m = build_model(tiny(arch), 6, 7, 11).unwrap();
            for _ in 0..5 {
                let x: Vec<usize> = (0..r.gen_range(1..5)).map(|_| r.gen_range(0..6)).collect();
                let mut y: Vec<usize> = (0..r.gen_range(0..4)).map(|_| r.gen_range(0..7)).collect();
                y.push(EOS);
                let ll = m.sequence_log_likelihood(&x, &y).unwrap();
                assert!(ll <= 0.0, "{arch}: log-likelihood {ll}");
            }
        }
    }

    #[test]
    fn target_contracts_are_enforced() {
        let m = build_model(tiny(ArchitectureKind::Hard), 5, 6, 2).unwrap();
        assert!(m.sequence_log_likelihood(&[1], &[]).is_err());
        assert!(m.sequence_log_likelihood(&[], &[EOS]).is_err());
        assert!(m.sequence_log_likelihood(&[1], &[4, 5]).is_err(), "must end with EOS");
        assert!(m.sequence_log_likelihood(&[1], &[9, EOS]).is_err(), "out of vocabulary");
    }

    #[test]
    fn dynamic_program_matches_enumeration_for_hard_models() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        for arch in [ArchitectureKind::Hard, ArchitectureKind::HardInputFed] {
            let m = build_model(tiny(arch), 6, 7, 13).unwrap();
            for _ in 0..10 {
                let x: Vec<usize> = (0..r.gen_range(1..5)).map(|_| r.gen_range(0..6)).collect();
                let mut y: Vec<usize> = (0..r.gen_range(0..4)).map(|_| r.gen_range(0..7)).collect();
                y.push(EOS);
                let dp = m.sequence_log_likelihood(&x, &y).unwrap();
                let bf = m.enumerated_log_likelihood(&x, &y).unwrap();
                assert!((dp - bf).abs() <= 1e-9, "{arch}: dp {dp} vs enumeration {bf}");
            }
        }
    }

    #[test]
    fn soft_and_hard_coincide_on_a_single_source_position() {
        // with |x| = 1 the alignment is one-hot, so mixing inside or outside
        // the output law is the same computation
        let soft = build_model(tiny(ArchitectureKind::Soft), 5, 6, 21).unwrap();
        let hard = build_model(tiny(ArchitectureKind::Hard), 5, 6, 21).unwrap();
        for y_mid in 0..6 {
            let y = [y_mid, EOS];
            let a = soft.sequence_log_likelihood(&[3], &y).unwrap();
            let b = hard.sequence_log_likelihood(&[3], &y).unwrap();
            assert_eq!(a, b, "one-hot alignment must collapse the gap bitwise");
        }
    }

    #[test]
    fn plain_decoder_states_are_architecture_independent() {
        let soft = build_model(tiny(ArchitectureKind::Soft), 6, 7, 31).unwrap();
        let hard = build_model(tiny(ArchitectureKind::Hard), 6, 7, 31).unwrap();
        let x = [2usize, 4, 1];
        let y = [4usize, 5, EOS];
        let states = |m: &TransducerModel| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let nodes = m.register(&mut g, false).unwrap();
            let forced = m.teacher_forced(&mut g, &nodes, &x, &y, &mut None).unwrap();
            forced.dec_hidden.iter().map(|&h| g.value(h).to_vec()).collect()
        };
        assert_eq!(states(&soft), states(&hard));
    }

    #[test]
    fn per_step_scores_match_batched_attention() {
        let m = build_model(tiny(ArchitectureKind::Hard), 6, 7, 33).unwrap();
        let x = [1usize, 3, 5];
        let y = [2usize, 6, EOS];
        let mut g = Graph::new();
        let nodes = m.register(&mut g, false).unwrap();
        let src = m.encode_source(&mut g, &nodes, &x, &mut None).unwrap();
        let mut state = m.init_step_state(&mut g, &nodes);
        let mut y_prev = BOS;
        let mut score_rows = Vec::new();
        let mut dec_rows = Vec::new();
        for &y_i in &y {
            let (out, next) = m.advance(&mut g, &nodes, &src, y_prev, &state, &mut None).unwrap();
            score_rows.push(g.value(out.scores).to_vec());
            dec_rows.push(out.h_dec);
            state = next;
            y_prev = y_i;
        }
        let h_dec = g.stack_rows(&dec_rows).unwrap();
        let batched =
            crate::align::attention_scores(&mut g, h_dec, src.h_enc, nodes.t, None).unwrap();
        let flat = g.value(batched.node);
        for (i, row) in score_rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - flat[i * x.len() + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reinforce_flag_leaves_evaluation_untouched() {
        let mut cfg = tiny(ArchitectureKind::Hard);
        cfg.reinforce = true;
        cfg.samples = 3;
        let trained = build_model(cfg, 5, 6, 17).unwrap();
        let plain = build_model(tiny(ArchitectureKind::Hard), 5, 6, 17).unwrap();
        let x = [1usize, 4];
        let y = [3usize, EOS];
        let a = trained.sequence_log_likelihood(&x, &y).unwrap();
        assert_eq!(a, trained.sequence_log_likelihood(&x, &y).unwrap(), "no sampling");
        assert_eq!(a, plain.sequence_log_likelihood(&x, &y).unwrap(), "same parameters");
    }

    #[test]
    fn exact_loss_is_negated_likelihood_and_reinforce_reports_reward() {
        let mut cfg = tiny(ArchitectureKind::HardInputFed);
        cfg.reinforce = true;
        cfg.samples = 2;
        let m = build_model(cfg, 5, 6, 19).unwrap();
        let x = [2usize, 3];
        let y = [4usize, EOS];

        let mut g = Graph::new();
        let nodes = m.register(&mut g, false).unwrap();
        let out = m.loss_node(&mut g, &nodes, &x, &y, &mut None, LossMode::Exact).unwrap();
        let ll = m.sequence_log_likelihood(&x, &y).unwrap();
        assert!((g.scalar_value(out.loss).unwrap() + ll).abs() < 1e-12);
        assert!(out.mean_reward.is_none());

        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut g2 = Graph::new();
        let nodes2 = m.register(&mut g2, false).unwrap();
        let out2 = m
            .loss_node(
                &mut g2,
                &nodes2,
                &x,
                &y,
                &mut None,
                LossMode::Reinforce { rng: &mut r, baseline: 0.0 },
            )
            .unwrap();
        let reward = out2.mean_reward.expect("REINFORCE reports its mean reward");
        assert!(reward < 0.0, "rewards are log probabilities");
        assert!(g2.scalar_value(out2.loss).unwrap().is_finite());
    }

    #[test]
    fn architecture_tokens_round_trip() {
        for arch in archs() {
            let token = arch.to_string();
            assert_eq!(token.parse::<ArchitectureKind>().unwrap(), arch);
        }
        assert!("monotone".parse::<ArchitectureKind>().is_err());
    }
}
