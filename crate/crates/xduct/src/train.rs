//! Batched maximum-likelihood training: Adam with bias correction, a
//! halving learning-rate schedule driven by development log-likelihood,
//! optional global-norm clipping, and versioned binary checkpoints.
//!
//! Each sequence evaluates on its own graph, so batches may fan out across
//! threads; gradients are reduced in a fixed order either way, keeping
//! training bitwise reproducible for a given seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::MovingBaseline;
use crate::data::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::model::{build_model, ArchitectureKind, LossMode, ModelConfig, TransducerModel};
use crate::nets::Dropout;
use crate::rng::stream;
use crate::tensor::{clip_global_norm, Graph};

/// One (source, target) pair as vocabulary indices; the target ends with
/// EOS.
pub type EncodedPair = (Vec<usize>, Vec<usize>);

/// Optimization settings. Clipping is a flag because only the large preset
/// uses it; REINFORCE sampling is configured on the model itself.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_floor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub checked: bool,
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_floor: 1e-5,
            max_epochs: 50,
            batch_size,
            clip_norm: None,
            seed,
            checked: false,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config { what: "batch size must be at least 1".into() });
        }
        if self.max_epochs == 0 {
            return Err(Error::Config { what: "must train for at least one epoch".into() });
        }
        if !(self.lr_floor < self.lr) {
            return Err(Error::Config {
                what: format!("learning-rate floor {} must lie below the rate {}", self.lr_floor, self.lr),
            });
        }
        if self.threads == 0 {
            return Err(Error::Config { what: "thread count must be at least 1".into() });
        }
        Ok(())
    }
}

// ── batching ────────────────────────────────────────────────────────────

/// Index matrices padded to the batch maximum, with masks that are false
/// exactly at padding and the original lengths.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    fn from_pairs(pairs: &[&EncodedPair]) -> Self {
        let max_src = pairs.iter().map(|(x, _)| x.len()).max().unwrap_or(0);
        let max_tgt = pairs.iter().map(|(_, y)| y.len()).max().unwrap_or(0);
        let mut b = Batch {
            src: Vec::with_capacity(pairs.len()),
            src_mask: Vec::with_capacity(pairs.len()),
            tgt: Vec::with_capacity(pairs.len()),
            tgt_mask: Vec::with_capacity(pairs.len()),
            src_lens: Vec::with_capacity(pairs.len()),
            tgt_lens: Vec::with_capacity(pairs.len()),
        };
        for (x, y) in pairs {
            let pad_row = |row: &[usize], width: usize| {
                let mut padded = row.to_vec();
                padded.resize(width, PAD);
                let mut mask = vec![true; row.len()];
                mask.resize(width, false);
                (padded, mask)
            };
            let (xs, xm) = pad_row(x, max_src);
            let (ys, ym) = pad_row(y, max_tgt);
            b.src.push(xs);
            b.src_mask.push(xm);
            b.tgt.push(ys);
            b.tgt_mask.push(ym);
            b.src_lens.push(x.len());
            b.tgt_lens.push(y.len());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// The i-th example trimmed back to its real length.
    pub fn sequence(&self, i: usize) -> (&[usize], &[usize]) {
        (&self.src[i][..self.src_lens[i]], &self.tgt[i][..self.tgt_lens[i]])
    }
}

/// Shuffles the dataset with a stream named by (seed, epoch) and chunks it
/// into padded batches; the final batch may be short.
pub fn make_batches(pairs: &[EncodedPair], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "batching".into() });
    }
    if batch_size == 0 {
        return Err(Error::Config { what: "batch size must be at least 1".into() });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = stream(seed, "shuffle", &[epoch]);
    // Fisher-Yates, fixed traversal order
    for i in (1..order.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&EncodedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&refs)
        })
        .collect())
}

// ── Adam ────────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers per parameter tensor, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn for_model(model: &TransducerModel) -> Self {
        let mut slots = Vec::new();
        model.visit_params(&mut |_, t| {
            slots.push(AdamSlot { m: vec![0.0; t.numel()], v: vec![0.0; t.numel()] });
        });
        AdamState { step: 0, slots }
    }
}

/// One bias-corrected update of a single tensor; `step` counts from 1.
pub fn adam_update_slice(
    param: &mut [f64],
    grad: &[f64],
    slot: &mut AdamSlot,
    lr: f64,
    step: u64,
) -> Result<()> {
    if param.len() != grad.len() || slot.m.len() != param.len() {
        return Err(Error::InvalidArgument {
            op: "adam_step",
            what: format!(
                "buffer sizes diverge: param {}, grad {}, moments {}",
                param.len(),
                grad.len(),
                slot.m.len()
            ),
        });
    }
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
        slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = slot.m[i] / c1;
        let v_hat = slot.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Applies one Adam step over every model parameter, gradients given in
/// registry order.
pub fn adam_step(
    model: &mut TransducerModel,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != state.slots.len() {
        return Err(Error::InvalidArgument {
            op: "adam_step",
            what: format!("{} gradient blocks for {} parameters", grads.len(), state.slots.len()),
        });
    }
    state.step += 1;
    let step = state.step;
    let mut idx = 0;
    let mut failure = None;
    model.visit_params_mut(&mut |_, t| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = adam_update_slice(t.data_mut(), &grads[idx], &mut state.slots[idx], lr, step)
        {
            failure = Some(e);
        }
        idx += 1;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ── fitting ─────────────────────────────────────────────────────────────

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate after this epoch's schedule adjustment.
    pub lr: f64,
    pub train_loss: f64,
    pub dev_log_likelihood: f64,
    pub dev_metric: f64,
    pub improved: bool,
}

/// Per-sequence result of one training evaluation.
struct SeqGrads {
    grads: Vec<Vec<f64>>,
    loss: f64,
    mean_reward: Option<f64>,
}

fn sequence_gradients(
    model: &TransducerModel,
    x: &[usize],
    y: &[usize],
    cfg: &TrainConfig,
    salts: &[u64],
    baseline: f64,
) -> Result<SeqGrads> {
    let mut g = if cfg.checked { Graph::checked() } else { Graph::new() };
    let nodes = model.register(&mut g, true)?;
    let mut dropout_rng;
    let mut dropout = if model.config.dropout > 0.0 {
        dropout_rng = stream(cfg.seed, "dropout", salts);
        Some(Dropout { rate: model.config.dropout, rng: &mut dropout_rng })
    } else {
        None
    };
    let outcome = if model.config.reinforce {
        let mut sample_rng = stream(cfg.seed, "sample", salts);
        model.loss_node(
            &mut g,
            &nodes,
            x,
            y,
            &mut dropout,
            LossMode::Reinforce { rng: &mut sample_rng, baseline },
        )?
    } else {
        model.loss_node(&mut g, &nodes, x, y, &mut dropout, LossMode::Exact)?
    };
    let loss = g.scalar_value(outcome.loss)?;
    g.backward(outcome.loss)?;
    // full-size zero blocks so untouched parameters still contribute shape
    let mut grads: Vec<Vec<f64>> = Vec::new();
    model.visit_params(&mut |_, t| grads.push(vec![0.0; t.numel()]));
    for (key, grad) in g.param_grads() {
        grads[key].copy_from_slice(grad);
    }
    Ok(SeqGrads { grads, loss, mean_reward: outcome.mean_reward })
}

/// Mean dev log-likelihood under the current parameters.
pub fn mean_log_likelihood(model: &TransducerModel, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "development evaluation".into() });
    }
    let mut total = 0.0;
    for (x, y) in pairs {
        total += model.sequence_log_likelihood(x, y)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Output of `fit`: the best checkpoint by the selection metric and the
/// full per-epoch log.
#[derive(Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Trains with Adam under a halving schedule: after any epoch whose dev
/// log-likelihood fails to improve on the best seen (strictly), the rate
/// halves; training stops when the rate falls below the floor or the epoch
/// cap is hit. The returned checkpoint holds the parameters of the epoch
/// with the best selection metric, ties broken by dev log-likelihood.
pub fn fit(
    model: &mut TransducerModel,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    train_pairs: &[EncodedPair],
    dev_pairs: &[EncodedPair],
    cfg: &TrainConfig,
    metric: impl Fn(&TransducerModel, &[EncodedPair]) -> Result<f64>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "training split".into() });
    }
    if dev_pairs.is_empty() {
        return Err(Error::EmptyDataset { what: "development split".into() });
    }

    let pool = (cfg.threads > 1)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config { what: format!("thread pool: {e}") })
        })
        .transpose()?;

    let mut adam = AdamState::for_model(model);
    let mut baseline = MovingBaseline::new();
    let mut lr = cfg.lr;
    // the untrained model sets the improvement bar, so a run that never
    // improves halves once per epoch from the start
    let mut best_ll_seen = mean_log_likelihood(model, dev_pairs)?;
    let mut log: Vec<EpochLog> = Vec::new();
    let mut best: Option<(f64, f64, Checkpoint)> = None;

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(train_pairs, cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let base = baseline.value;
            let run_one = |i: usize| -> Result<SeqGrads> {
                let (x, y) = batch.sequence(i);
                sequence_gradients(
                    model,
                    x,
                    y,
                    cfg,
                    &[epoch as u64, batch_idx as u64, i as u64],
                    base,
                )
            };
            let collected: Result<Vec<SeqGrads>> = match &pool {
                Some(p) => p.install(|| {
                    (0..batch.len()).into_par_iter().map(run_one).collect()
                }),
                None => (0..batch.len()).map(run_one).collect(),
            };
            let results = match collected {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_idx })
                }
                Err(e) => return Err(e),
            };

            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<Vec<f64>> = Vec::new();
            let mut batch_loss = 0.0;
            let mut reward_sum = 0.0;
            let mut reward_count = 0usize;
            for r in &results {
                if acc.is_empty() {
                    acc = r.grads.iter().map(|g| vec![0.0; g.len()]).collect();
                }
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    for (av, gv) in a.iter_mut().zip(g) {
                        *av += scale * gv;
                    }
                }
                batch_loss += scale * r.loss;
                if let Some(w) = r.mean_reward {
                    reward_sum += w;
                    reward_count += 1;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            if let Some(max_norm) = cfg.clip_norm {
                let mut views: Vec<&mut [f64]> = acc.iter_mut().map(|g| g.as_mut_slice()).collect();
                clip_global_norm(&mut views, max_norm)?;
            }
            adam_step(model, &acc, &mut adam, lr)?;
            if reward_count > 0 {
                baseline.update(reward_sum / reward_count as f64);
            }
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen as f64;

        let dev_ll = mean_log_likelihood(model, dev_pairs)?;
        let dev_metric = metric(model, dev_pairs)?;
        let improved = dev_ll > best_ll_seen;
        if improved {
            best_ll_seen = dev_ll;
        } else {
            lr /= 2.0;
        }
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}, dev ll {dev_ll:.6}, \
             dev metric {dev_metric:.4}, lr {lr:.2e}"
        );
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            dev_log_likelihood: dev_ll,
            dev_metric,
            improved,
        });

        let better = match &best {
            None => true,
            Some((m, ll, _)) => dev_metric > *m || (dev_metric == *m && dev_ll > *ll),
        };
        if better {
            let ckpt = Checkpoint {
                config: model.config,
                src_vocab: src_vocab.clone(),
                tgt_vocab: tgt_vocab.clone(),
                model: model.clone(),
                adam: adam.clone(),
                epoch,
                history: log.clone(),
            };
            best = Some((dev_metric, dev_ll, ckpt));
        }

        if lr < cfg.lr_floor {
            break;
        }
    }

    let (_, _, mut ckpt) = best.expect("at least one epoch ran");
    ckpt.history = log.clone();
    Ok(FitOutcome { best: ckpt, log })
}

// ── checkpoints ─────────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with everything needed to evaluate or resume it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub model: TransducerModel,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    params: Vec<(String, Vec<usize>)>,
    adam_step: u64,
    epoch: usize,
    history: Vec<EpochLog>,
}

impl Checkpoint {
    /// Refuses evaluation under a different architecture unless overridden.
    pub fn ensure_architecture(&self, requested: ArchitectureKind, allow_override: bool) -> Result<()> {
        if self.config.arch == requested || allow_override {
            Ok(())
        } else {
            Err(Error::ArchMismatch {
                stored: self.config.arch.to_string(),
                requested: requested.to_string(),
            })
        }
    }
}

fn write_f64s(out: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes).map_err(|_| Error::Checkpoint {
        what: "payload ends before all tensors are read".into(),
    })?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
/// then per parameter in registry order three little-endian f64 blocks:
/// values, Adam first moment, Adam second moment.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: ckpt.config,
        src_vocab: ckpt.src_vocab.clone(),
        tgt_vocab: ckpt.tgt_vocab.clone(),
        params: ckpt.model.param_entries(),
        adam_step: ckpt.adam.step,
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    let mut idx = 0;
    let mut failure = None;
    ckpt.model.visit_params(&mut |_, t| {
        if failure.is_some() {
            return;
        }
        let slot = &ckpt.adam.slots[idx];
        if let Err(e) = write_f64s(&mut out, t.data())
            .and_then(|_| write_f64s(&mut out, &slot.m))
            .and_then(|_| write_f64s(&mut out, &slot.v))
        {
            failure = Some(e);
        }
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint { what: "file too short for magic".into() })?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint { what: "not a checkpoint file".into() });
    }
    let mut word = [0u8; 4];
    input
        .read_exact(&mut word)
        .map_err(|_| Error::Checkpoint { what: "file too short for version".into() })?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            what: format!("version {version} unsupported (expected {CHECKPOINT_VERSION})"),
        });
    }
    let mut len_word = [0u8; 8];
    input
        .read_exact(&mut len_word)
        .map_err(|_| Error::Checkpoint { what: "file too short for header length".into() })?;
    let header_len = u64::from_le_bytes(len_word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint { what: "header truncated".into() })?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.version != version {
        return Err(Error::Checkpoint { what: "header disagrees with file version".into() });
    }
    let mut src_vocab = header.src_vocab;
    let mut tgt_vocab = header.tgt_vocab;
    src_vocab.reindex();
    tgt_vocab.reindex();

    let mut model = build_model(header.config, src_vocab.len(), tgt_vocab.len(), 0)?;
    let built = model.param_entries();
    if built != header.params {
        return Err(Error::Checkpoint {
            what: "stored parameter registry does not match the configured model".into(),
        });
    }
    let mut adam = AdamState { step: header.adam_step, slots: Vec::with_capacity(built.len()) };
    let mut failure = None;
    model.visit_params_mut(&mut |_, t| {
        if failure.is_some() {
            return;
        }
        let n = t.numel();
        match read_f64s(&mut input, n) {
            Ok(values) => t.data_mut().copy_from_slice(&values),
            Err(e) => {
                failure = Some(e);
                return;
            }
        }
        match (read_f64s(&mut input, n), read_f64s(&mut input, n)) {
            (Ok(m), Ok(v)) => adam.slots.push(AdamSlot { m, v }),
            (Err(e), _) | (_, Err(e)) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint { what: "trailing bytes after payload".into() });
    }
    Ok(Checkpoint {
        config: header.config,
        src_vocab,
        tgt_vocab,
        model,
        adam,
        epoch: header.epoch,
        history: header.history,
    })
}
