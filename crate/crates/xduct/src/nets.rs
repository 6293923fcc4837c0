//! Recurrent building blocks: LSTM cell, bidirectional encoder, and the
//! unidirectional decoder in plain and input-fed forms.
//!
//! Parameter bundles own their tensors and expose a fixed iteration order
//! (`for_each`) that registration, optimization, and checkpointing all
//! share, so a parameter's registry key is simply its position in that walk.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Uniform init in ±sqrt(1/fan_in) where fan_in is the column count.
pub fn init_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (1.0 / cols as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches buffer").with_grad()
}

fn zeros_vec(n: usize) -> Tensor {
    Tensor::vector(vec![0.0; n]).with_grad()
}

/// Inverted dropout over one node: train-time masks scale surviving entries
/// by 1/keep so evaluation needs no rescaling.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

pub fn apply_dropout(
    g: &mut Graph<'_>,
    x: NodeId,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    let Some(d) = dropout.as_mut() else { return Ok(x) };
    if d.rate == 0.0 {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&d.rate) {
        return Err(Error::InvalidArgument {
            op: "dropout",
            what: format!("rate {} outside [0, 1)", d.rate),
        });
    }
    let keep = 1.0 - d.rate;
    let n: usize = g.shape(x).iter().product();
    let mask: Vec<f64> =
        (0..n).map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let shape = g.shape(x).to_vec();
    let m = g.constant(Tensor::new(shape, mask).expect("mask matches shape"));
    g.mul(x, m)
}

// ── LSTM cell ───────────────────────────────────────────────────────────

/// Per-gate weight matrices `w_x*` (d_h x d_in), `w_h*` (d_h x d_h) and
/// biases (d_h) for input, forget, candidate, and output gates.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xg: Tensor,
    pub w_hg: Tensor,
    pub b_g: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmParams {
    /// Fresh cell with uniform ±sqrt(1/fan_in) weights, zero biases, and the
    /// forget-gate bias at +1.
    pub fn init(d_in: usize, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = LstmParams {
            w_xi: init_matrix(d_h, d_in, rng),
            w_hi: init_matrix(d_h, d_h, rng),
            b_i: zeros_vec(d_h),
            w_xf: init_matrix(d_h, d_in, rng),
            w_hf: init_matrix(d_h, d_h, rng),
            b_f: zeros_vec(d_h),
            w_xg: init_matrix(d_h, d_in, rng),
            w_hg: init_matrix(d_h, d_h, rng),
            b_g: zeros_vec(d_h),
            w_xo: init_matrix(d_h, d_in, rng),
            w_ho: init_matrix(d_h, d_h, rng),
            b_o: zeros_vec(d_h),
            d_in,
            d_h,
        };
        p.b_f.data_mut().iter_mut().for_each(|x| *x = 1.0);
        p
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        LstmParams {
            w_xi: Tensor::zeros(vec![d_h, d_in]).with_grad(),
            w_hi: Tensor::zeros(vec![d_h, d_h]).with_grad(),
            b_i: zeros_vec(d_h),
            w_xf: Tensor::zeros(vec![d_h, d_in]).with_grad(),
            w_hf: Tensor::zeros(vec![d_h, d_h]).with_grad(),
            b_f: zeros_vec(d_h),
            w_xg: Tensor::zeros(vec![d_h, d_in]).with_grad(),
            w_hg: Tensor::zeros(vec![d_h, d_h]).with_grad(),
            b_g: zeros_vec(d_h),
            w_xo: Tensor::zeros(vec![d_h, d_in]).with_grad(),
            w_ho: Tensor::zeros(vec![d_h, d_h]).with_grad(),
            b_o: zeros_vec(d_h),
            d_in,
            d_h,
        }
    }

    /// Fixed field order shared by registration, optimizers, and checkpoints.
    pub fn for_each<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s Tensor)) {
        for (name, t) in [
            ("w_xi", &self.w_xi),
            ("w_hi", &self.w_hi),
            ("b_i", &self.b_i),
            ("w_xf", &self.w_xf),
            ("w_hf", &self.w_hf),
            ("b_f", &self.b_f),
            ("w_xg", &self.w_xg),
            ("w_hg", &self.w_hg),
            ("b_g", &self.b_g),
            ("w_xo", &self.w_xo),
            ("w_ho", &self.w_ho),
            ("b_o", &self.b_o),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        for (name, t) in [
            ("w_xi", &mut self.w_xi),
            ("w_hi", &mut self.w_hi),
            ("b_i", &mut self.b_i),
            ("w_xf", &mut self.w_xf),
            ("w_hf", &mut self.w_hf),
            ("b_f", &mut self.b_f),
            ("w_xg", &mut self.w_xg),
            ("w_hg", &mut self.w_hg),
            ("b_g", &mut self.b_g),
            ("w_xo", &mut self.w_xo),
            ("w_ho", &mut self.w_ho),
            ("b_o", &mut self.b_o),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    /// Registers all twelve tensors on a graph, consuming sequential keys.
    pub fn register<'a>(&'a self, g: &mut Graph<'a>, key: &mut usize, train: bool) -> LstmNodes {
        let mut ids = Vec::with_capacity(12);
        self.for_each("", &mut |_, t| {
            let id = if train { g.param(t, *key) } else { g.param_frozen(t, *key) };
            *key += 1;
            ids.push(id);
        });
        LstmNodes {
            w_xi: ids[0],
            w_hi: ids[1],
            b_i: ids[2],
            w_xf: ids[3],
            w_hf: ids[4],
            b_f: ids[5],
            w_xg: ids[6],
            w_hg: ids[7],
            b_g: ids[8],
            w_xo: ids[9],
            w_ho: ids[10],
            b_o: ids[11],
            d_h: self.d_h,
        }
    }
}

/// Graph-side handles for one registered LSTM cell.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub w_xi: NodeId,
    pub w_hi: NodeId,
    pub b_i: NodeId,
    pub w_xf: NodeId,
    pub w_hf: NodeId,
    pub b_f: NodeId,
    pub w_xg: NodeId,
    pub w_hg: NodeId,
    pub b_g: NodeId,
    pub w_xo: NodeId,
    pub w_ho: NodeId,
    pub b_o: NodeId,
    pub d_h: usize,
}

/// One LSTM transition: sigmoid input/forget/output gates, tanh candidate
/// and output squash.
pub fn lstm_step(
    g: &mut Graph<'_>,
    p: &LstmNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let gate = |g: &mut Graph<'_>, wx: NodeId, wh: NodeId, b: NodeId| -> Result<NodeId> {
        let xa = g.matvec(wx, x)?;
        let ha = g.matvec(wh, h_prev)?;
        let s = g.add(xa, ha)?;
        g.add(s, b)
    };
    let i_pre = gate(g, p.w_xi, p.w_hi, p.b_i)?;
    let i = g.sigmoid(i_pre)?;
    let f_pre = gate(g, p.w_xf, p.w_hf, p.b_f)?;
    let f = g.sigmoid(f_pre)?;
    let g_pre = gate(g, p.w_xg, p.w_hg, p.b_g)?;
    let cand = g.tanh(g_pre)?;
    let o_pre = gate(g, p.w_xo, p.w_ho, p.b_o)?;
    let o = g.sigmoid(o_pre)?;

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let c_squash = g.tanh(c)?;
    let h = g.mul(o, c_squash)?;
    Ok((h, c))
}

// ── encoder ─────────────────────────────────────────────────────────────

/// Source embedding plus forward/backward LSTM stacks of equal depth.
/// Layer l > 0 consumes layer l-1's concatenated output rows (width 2 d_h).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed: Tensor,
    pub fwd: Vec<LstmParams>,
    pub bwd: Vec<LstmParams>,
}

impl EncoderParams {
    pub fn init(vocab: usize, d_e: usize, d_h: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for l in 0..layers {
            let d_in = if l == 0 { d_e } else { 2 * d_h };
            fwd.push(LstmParams::init(d_in, d_h, rng));
            bwd.push(LstmParams::init(d_in, d_h, rng));
        }
        EncoderParams { embed: init_matrix(vocab, d_e, rng), fwd, bwd }
    }

    pub fn d_h(&self) -> usize {
        self.fwd[0].d_h
    }

    pub fn for_each<'s>(&'s self, f: &mut impl FnMut(String, &'s Tensor)) {
        f("enc.embed".into(), &self.embed);
        for (l, cell) in self.fwd.iter().enumerate() {
            cell.for_each(&format!("enc.l{l}.fwd"), f);
        }
        for (l, cell) in self.bwd.iter().enumerate() {
            cell.for_each(&format!("enc.l{l}.bwd"), f);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("enc.embed".into(), &mut self.embed);
        for (l, cell) in self.fwd.iter_mut().enumerate() {
            cell.for_each_mut(&format!("enc.l{l}.fwd"), f);
        }
        for (l, cell) in self.bwd.iter_mut().enumerate() {
            cell.for_each_mut(&format!("enc.l{l}.bwd"), f);
        }
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a>, key: &mut usize, train: bool) -> EncoderNodes {
        let embed = if train { g.param(&self.embed, *key) } else { g.param_frozen(&self.embed, *key) };
        *key += 1;
        let fwd: Vec<LstmNodes> = self.fwd.iter().map(|c| c.register(g, key, train)).collect();
        let bwd: Vec<LstmNodes> = self.bwd.iter().map(|c| c.register(g, key, train)).collect();
        EncoderNodes { embed, fwd, bwd }
    }
}

pub struct EncoderNodes {
    pub embed: NodeId,
    pub fwd: Vec<LstmNodes>,
    pub bwd: Vec<LstmNodes>,
}

/// Runs the bidirectional stack over a source index sequence and returns the
/// |x| x 2d_h matrix whose row j concatenates forward and backward states.
/// Initial hidden and cell states are zero.
pub fn encode(
    g: &mut Graph<'_>,
    p: &EncoderNodes,
    x: &[usize],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<NodeId> {
    if x.is_empty() {
        return Err(Error::EmptyInput { op: "encode" });
    }
    let vocab = g.shape(p.embed)[0];
    if let Some(&bad) = x.iter().find(|&&i| i >= vocab) {
        return Err(Error::IndexOutOfRange { op: "encode", index: bad, bound: vocab });
    }
    let n = x.len();
    let d_h = p.fwd[0].d_h;

    let mut inputs: Vec<NodeId> = Vec::with_capacity(n);
    for &xi in x {
        let e = g.row(p.embed, xi)?;
        inputs.push(apply_dropout(g, e, dropout)?);
    }

    let layers = p.fwd.len();
    for l in 0..layers {
        let zero_h = g.constant_vec(vec![0.0; d_h]);
        let zero_c = g.constant_vec(vec![0.0; d_h]);
        let mut fwd_states = Vec::with_capacity(n);
        let (mut h, mut c) = (zero_h, zero_c);
        for &inp in &inputs {
            let (nh, nc) = lstm_step(g, &p.fwd[l], inp, h, c)?;
            fwd_states.push(nh);
            h = nh;
            c = nc;
        }
        let zero_h = g.constant_vec(vec![0.0; d_h]);
        let zero_c = g.constant_vec(vec![0.0; d_h]);
        let mut bwd_states = vec![zero_h; n];
        let (mut h, mut c) = (zero_h, zero_c);
        for j in (0..n).rev() {
            let (nh, nc) = lstm_step(g, &p.bwd[l], inputs[j], h, c)?;
            bwd_states[j] = nh;
            h = nh;
            c = nc;
        }
        let mut outputs = Vec::with_capacity(n);
        for j in 0..n {
            let cat = g.concat(&[fwd_states[j], bwd_states[j]])?;
            outputs.push(apply_dropout(g, cat, dropout)?);
        }
        inputs = outputs;
    }
    g.stack_rows(&inputs)
}

// ── decoder ─────────────────────────────────────────────────────────────

/// Target embedding, LSTM stack, and (input-fed variants only) the linear
/// merge map from d_e + d_s down to d_e.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub embed: Tensor,
    pub layers: Vec<LstmParams>,
    pub merge: Option<Tensor>,
}

impl DecoderParams {
    pub fn init(
        vocab: usize,
        d_e: usize,
        d_dec: usize,
        layers: usize,
        merge_d_s: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let embed = init_matrix(vocab, d_e, rng);
        let mut stack = Vec::new();
        for l in 0..layers {
            let d_in = if l == 0 { d_e } else { d_dec };
            stack.push(LstmParams::init(d_in, d_dec, rng));
        }
        let merge = merge_d_s.map(|d_s| init_matrix(d_e, d_e + d_s, rng));
        DecoderParams { embed, layers: stack, merge }
    }

    pub fn d_h(&self) -> usize {
        self.layers[0].d_h
    }

    pub fn for_each<'s>(&'s self, f: &mut impl FnMut(String, &'s Tensor)) {
        f("dec.embed".into(), &self.embed);
        for (l, cell) in self.layers.iter().enumerate() {
            cell.for_each(&format!("dec.l{l}"), f);
        }
        if let Some(m) = &self.merge {
            f("dec.merge".into(), m);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("dec.embed".into(), &mut self.embed);
        for (l, cell) in self.layers.iter_mut().enumerate() {
            cell.for_each_mut(&format!("dec.l{l}"), f);
        }
        if let Some(m) = &mut self.merge {
            f("dec.merge".into(), m);
        }
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a>, key: &mut usize, train: bool) -> DecoderNodes {
        let embed = if train { g.param(&self.embed, *key) } else { g.param_frozen(&self.embed, *key) };
        *key += 1;
        let layers: Vec<LstmNodes> =
            self.layers.iter().map(|c| c.register(g, key, train)).collect();
        let merge = self.merge.as_ref().map(|m| {
            let id = if train { g.param(m, *key) } else { g.param_frozen(m, *key) };
            *key += 1;
            id
        });
        DecoderNodes { embed, layers, merge }
    }
}

pub struct DecoderNodes {
    pub embed: NodeId,
    pub layers: Vec<LstmNodes>,
    pub merge: Option<NodeId>,
}

/// Per-layer (h, c) pairs carried across decoder steps.
#[derive(Debug, Clone)]
pub struct DecState {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl DecState {
    pub fn zero(g: &mut Graph<'_>, p: &DecoderNodes) -> Self {
        let layers = p
            .layers
            .iter()
            .map(|cell| {
                let h = g.constant_vec(vec![0.0; cell.d_h]);
                let c = g.constant_vec(vec![0.0; cell.d_h]);
                (h, c)
            })
            .collect();
        DecState { layers }
    }
}

/// One decoder transition from the previous output symbol. The plain
/// variant consumes the symbol embedding alone; the input-fed variant
/// merges the embedding with the previous step's fed vector down to d_e.
/// Returns the top layer's hidden state and the updated state.
pub fn decoder_step(
    g: &mut Graph<'_>,
    p: &DecoderNodes,
    y_prev: usize,
    state: &DecState,
    feed: Option<NodeId>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(NodeId, DecState)> {
    let vocab = g.shape(p.embed)[0];
    if y_prev >= vocab {
        return Err(Error::IndexOutOfRange { op: "decoder_step", index: y_prev, bound: vocab });
    }
    let emb = g.row(p.embed, y_prev)?;
    let emb = apply_dropout(g, emb, dropout)?;

    let input = match (p.merge, feed) {
        (None, None) => emb,
        (Some(merge), Some(fed)) => {
            let cat = g.concat(&[emb, fed])?;
            g.matvec(merge, cat)?
        }
        (None, Some(_)) => {
            return Err(Error::InvalidArgument {
                op: "decoder_step",
                what: "feed vector supplied to a plain decoder".into(),
            })
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument {
                op: "decoder_step",
                what: "input-fed decoder called without a feed vector".into(),
            })
        }
    };

    let mut new_state = Vec::with_capacity(state.layers.len());
    let mut x = input;
    for (cell, &(h_prev, c_prev)) in p.layers.iter().zip(&state.layers) {
        let (h, c) = lstm_step(g, cell, x, h_prev, c_prev)?;
        new_state.push((h, c));
        x = apply_dropout(g, h, dropout)?;
    }
    Ok((x, DecState { layers: new_state }))
}
