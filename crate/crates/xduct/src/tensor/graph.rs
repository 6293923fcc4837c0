//! Operation recording and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op validates shapes,
//! computes its forward value eagerly, and records parent ids so
//! [`Graph::backward`] can sweep the arena once in reverse order. Leaves
//! either borrow an external [`Tensor`]'s buffer (parameters, inputs) or own
//! a constant buffer (masks, fixtures).
//!
//! In checked mode every op output is scanned and NaN or +inf values are
//! rejected. -inf is deliberately admitted: it is the sentinel for masked
//! attention scores and for log-probabilities of impossible events, and the
//! softmax/logsumexp kernels treat it as exact zero probability.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Storage<'a> {
    Owned(Vec<f64>),
    Borrowed(&'a [f64]),
}

impl Storage<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

enum Op {
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    Matmul { a: usize, b: usize },
    /// `[m,k] x [n,k]ᵀ -> [m,n]`
    MatmulTB { a: usize, b: usize },
    /// `[r,c] x [c] -> [r]`
    MatVec { m: usize, v: usize },
    /// `[r,c]ᵀ x [r] -> [c]`
    TMatVec { m: usize, v: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    /// `[r,c] + [c]` broadcast over rows.
    AddRowBroadcast { m: usize, v: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Exp { x: usize },
    Log { x: usize },
    /// 1-D concatenation of vectors, in order.
    Concat { parts: Vec<usize> },
    /// 1-D contiguous slice.
    Slice { x: usize, start: usize },
    /// Column range of a matrix.
    SliceCols { m: usize, start: usize },
    Row { m: usize, i: usize },
    Col { m: usize, j: usize },
    /// Single vector entry as a scalar node.
    Index { v: usize, i: usize },
    /// Stacks equal-length vectors into a matrix.
    StackRows { rows: Vec<usize> },
    SoftmaxRows { x: usize },
    LogSoftmaxRows { x: usize },
    /// `[n] -> [1]`, stable log of summed exponentials.
    LogSumExp { v: usize },
    /// Sum of all entries, `[..] -> [1]`.
    Sum { x: usize },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Storage<'a>,
    op: Op,
    requires_grad: bool,
}

/// Thread-confined autodiff arena. The lifetime ties borrowed leaves
/// (parameters, inputs) to the graph.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    /// Persistent leaf gradients; indexed like `nodes`, `None` for interior
    /// nodes and for leaves that never received gradient.
    grads: Vec<Option<Vec<f64>>>,
    /// Leaves registered with an external parameter key.
    param_leaves: Vec<(NodeId, usize)>,
    checked: bool,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), param_leaves: Vec::new(), checked: false }
    }

    /// A graph that rejects NaN and +inf at every op boundary.
    pub fn checked() -> Self {
        Graph { checked: true, ..Graph::new() }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Borrows a tensor as a leaf; gradient is tracked iff the tensor asks.
    pub fn leaf(&mut self, t: &'a Tensor) -> NodeId {
        self.push_leaf(t.shape().to_vec(), Storage::Borrowed(t.data()), t.requires_grad())
    }

    /// Borrows a tensor as a leaf with gradient tracking disabled.
    pub fn leaf_frozen(&mut self, t: &'a Tensor) -> NodeId {
        self.push_leaf(t.shape().to_vec(), Storage::Borrowed(t.data()), false)
    }

    /// Borrows a parameter tensor, remembering `key` so its gradient can be
    /// routed back to the owning parameter set after `backward`.
    pub fn param(&mut self, t: &'a Tensor, key: usize) -> NodeId {
        let id = self.leaf(t);
        self.param_leaves.push((id, key));
        id
    }

    /// Same as [`Graph::param`] but with gradient tracking disabled; used for
    /// evaluation-only passes.
    pub fn param_frozen(&mut self, t: &'a Tensor, _key: usize) -> NodeId {
        self.leaf_frozen(t)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let Tensor { shape, data, .. } = t;
        self.push_leaf(shape, Storage::Owned(data), false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> NodeId {
        let shape = vec![data.len()];
        self.push_leaf(shape, Storage::Owned(data), false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.push_leaf(vec![1], Storage::Owned(vec![x]), false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Storage<'a>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { shape, value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    // ── accessors ───────────────────────────────────────────────────────

    pub fn value(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.as_slice()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.len() != 1 {
            return Err(Error::InvalidShape {
                op: "scalar_value",
                expected: "a single-entry tensor",
                got: self.shape(id).to_vec(),
            });
        }
        Ok(v[0])
    }

    /// Gradient of the last `backward` target w.r.t. a leaf, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// `(key, gradient)` for every registered parameter leaf that received
    /// gradient in the latest backward sweep(s).
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.param_leaves
            .iter()
            .filter_map(|&(id, key)| self.grads[id.0].as_deref().map(|g| (key, g)))
    }

    // ── op plumbing ─────────────────────────────────────────────────────

    fn push_op(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, parents: &[usize]) -> Result<NodeId> {
        if self.checked {
            for (i, &v) in value.iter().enumerate() {
                if v.is_nan() || v == f64::INFINITY {
                    return Err(Error::NonFinite { op: op_name(&op), index: i, value: v });
                }
            }
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { shape, value: Storage::Owned(value), op, requires_grad });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                op,
                expected: "a matrix",
                got: self.nodes[id.0].shape.clone(),
            }),
        }
    }

    fn dims1(&self, op: &'static str, id: NodeId) -> Result<usize> {
        match self.nodes[id.0].shape[..] {
            [n] => Ok(n),
            _ => Err(Error::InvalidShape {
                op,
                expected: "a vector",
                got: self.nodes[id.0].shape.clone(),
            }),
        }
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_kernel(self.value(a), self.value(b), m, k, n);
        self.push_op(Op::Matmul { a: a.0, b: b.0 }, vec![m, n], out, &[a.0, b.0])
    }

    /// `a · bᵀ`; both operands row-major, so every output entry is a
    /// contiguous dot product.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul_tb", a)?;
        let (n, k2) = self.dims2("matmul_tb", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bv[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                out[i * n + j] = s;
            }
        }
        self.push_op(Op::MatmulTB { a: a.0, b: b.0 }, vec![m, n], out, &[a.0, b.0])
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("matvec", m)?;
        let n = self.dims1("matvec", v)?;
        if c != n {
            return Err(Error::ShapeMismatch { op: "matvec", lhs: vec![r, c], rhs: vec![n] });
        }
        let (mv, vv) = (self.value(m), self.value(v));
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &mv[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                s += row[j] * vv[j];
            }
            out[i] = s;
        }
        self.push_op(Op::MatVec { m: m.0, v: v.0 }, vec![r], out, &[m.0, v.0])
    }

    /// `mᵀ · u` without materializing the transpose.
    pub fn tmatvec(&mut self, m: NodeId, u: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("tmatvec", m)?;
        let n = self.dims1("tmatvec", u)?;
        if r != n {
            return Err(Error::ShapeMismatch { op: "tmatvec", lhs: vec![r, c], rhs: vec![n] });
        }
        let (mv, uv) = (self.value(m), self.value(u));
        let mut out = vec![0.0; c];
        for i in 0..r {
            let ui = uv[i];
            let row = &mv[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] += ui * row[j];
            }
        }
        self.push_op(Op::TMatVec { m: m.0, v: u.0 }, vec![c], out, &[m.0, u.0])
    }

    // ── pointwise ───────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, |a0, b0| Op::Add { a: a0, b: b0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, |a0, b0| Op::Mul { a: a0, b: b0 })
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize) -> Op,
    ) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(mk(a.0, b.0), shape, out, &[a.0, b.0])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push_op(Op::Scale { x: x.0, c }, shape, out, &[x.0])
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("add_row_broadcast", m)?;
        let n = self.dims1("add_row_broadcast", v)?;
        if c != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: vec![r, c],
                rhs: vec![n],
            });
        }
        let (mv, vv) = (self.value(m), self.value(v));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] + vv[j];
            }
        }
        self.push_op(Op::AddRowBroadcast { m: m.0, v: v.0 }, vec![r, c], out, &[m.0, v.0])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_op(x, f64::tanh, Op::Tanh { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_op(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x: x.0 })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_op(x, f64::exp, Op::Exp { x: x.0 })
    }

    /// Natural log; rejects non-positive inputs regardless of checked mode.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some((i, &v)) = self.value(x).iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::Domain { op: "log", index: i, value: v });
        }
        self.unary_op(x, f64::ln, Op::Log { x: x.0 })
    }

    fn unary_op(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push_op(op, shape, out, &[x.0])
    }

    // ── structure ───────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput { op: "concat" });
        }
        let mut out = Vec::new();
        for &p in parts {
            self.dims1("concat", p)?;
            out.extend_from_slice(self.value(p));
        }
        let shape = vec![out.len()];
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push_op(Op::Concat { parts: ids.clone() }, shape, out, &ids)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.dims1("slice", x)?;
        if start + len > n {
            return Err(Error::IndexOutOfRange { op: "slice", index: start + len, bound: n });
        }
        let out = self.value(x)[start..start + len].to_vec();
        self.push_op(Op::Slice { x: x.0, start }, vec![len], out, &[x.0])
    }

    pub fn slice_cols(&mut self, m: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2("slice_cols", m)?;
        if start + len > c {
            return Err(Error::IndexOutOfRange { op: "slice_cols", index: start + len, bound: c });
        }
        let mv = self.value(m);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&mv[i * c + start..i * c + start + len]);
        }
        self.push_op(Op::SliceCols { m: m.0, start }, vec![r, len], out, &[m.0])
    }

    pub fn row(&mut self, m: NodeId, i: usize) -> Result<NodeId> {
        let (r, c) = self.dims2("row", m)?;
        if i >= r {
            return Err(Error::IndexOutOfRange { op: "row", index: i, bound: r });
        }
        let out = self.value(m)[i * c..(i + 1) * c].to_vec();
        self.push_op(Op::Row { m: m.0, i }, vec![c], out, &[m.0])
    }

    pub fn col(&mut self, m: NodeId, j: usize) -> Result<NodeId> {
        let (r, c) = self.dims2("col", m)?;
        if j >= c {
            return Err(Error::IndexOutOfRange { op: "col", index: j, bound: c });
        }
        let mv = self.value(m);
        let out: Vec<f64> = (0..r).map(|i| mv[i * c + j]).collect();
        self.push_op(Op::Col { m: m.0, j }, vec![r], out, &[m.0])
    }

    pub fn index(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        let n = self.dims1("index", v)?;
        if i >= n {
            return Err(Error::IndexOutOfRange { op: "index", index: i, bound: n });
        }
        let out = vec![self.value(v)[i]];
        self.push_op(Op::Index { v: v.0, i }, vec![1], out, &[v.0])
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::EmptyInput { op: "stack_rows" });
        }
        let c = self.dims1("stack_rows", rows[0])?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &rid in rows {
            let n = self.dims1("stack_rows", rid)?;
            if n != c {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![c],
                    rhs: vec![n],
                });
            }
            out.extend_from_slice(self.value(rid));
        }
        let ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
        self.push_op(Op::StackRows { rows: ids.clone() }, vec![rows.len(), c], out, &ids)
    }

    // ── reductions and normalizers ──────────────────────────────────────

    /// Row-wise softmax with max subtraction. A 1-D input is one row.
    /// -inf entries get probability exactly 0; a row with no finite entry
    /// is a domain error.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_view("softmax_rows", x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xs = &xv[r * cols..(r + 1) * cols];
            softmax_row(xs, &mut out[r * cols..(r + 1) * cols])
                .map_err(|_| Error::Domain { op: "softmax_rows", index: r, value: f64::NEG_INFINITY })?;
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push_op(Op::SoftmaxRows { x: x.0 }, shape, out, &[x.0])
    }

    /// Row-wise log-softmax; masked (-inf) entries stay -inf.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_view("log_softmax_rows", x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xs = &xv[r * cols..(r + 1) * cols];
            let lse = logsumexp_slice(xs);
            if lse == f64::NEG_INFINITY {
                return Err(Error::Domain {
                    op: "log_softmax_rows",
                    index: r,
                    value: f64::NEG_INFINITY,
                });
            }
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xs) {
                *o = v - lse;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push_op(Op::LogSoftmaxRows { x: x.0 }, shape, out, &[x.0])
    }

    fn rows_view(&self, op: &'static str, x: NodeId) -> Result<(usize, usize)> {
        match self.nodes[x.0].shape[..] {
            [n] => Ok((1, n)),
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                op,
                expected: "a vector or matrix",
                got: self.nodes[x.0].shape.clone(),
            }),
        }
    }

    /// `log Σ exp(x_j)` over a vector, max-shifted. Exact for a single
    /// entry; -inf entries contribute zero.
    pub fn logsumexp(&mut self, v: NodeId) -> Result<NodeId> {
        let n = self.dims1("logsumexp", v)?;
        if n == 0 {
            return Err(Error::EmptyInput { op: "logsumexp" });
        }
        let out = vec![logsumexp_slice(self.value(v))];
        self.push_op(Op::LogSumExp { v: v.0 }, vec![1], out, &[v.0])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut s = 0.0;
        for &v in self.value(x) {
            s += v;
        }
        self.push_op(Op::Sum { x: x.0 }, vec![1], vec![s], &[x.0])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients land in per-leaf buffers
    /// (readable via [`Graph::grad`] / [`Graph::param_grads`]) and
    /// accumulate across repeated calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].shape != [1] {
            return Err(Error::InvalidShape {
                op: "backward",
                expected: "a scalar root",
                got: self.nodes[root.0].shape.clone(),
            });
        }

        // transient adjoints for the sweep; persistent grads only for leaves
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(vec![1.0]);
            for id in (0..=root.0).rev() {
                let Some(dy) = adj[id].take() else { continue };
                if !self.nodes[id].requires_grad {
                    continue;
                }
                self.propagate(id, &dy, &mut adj);
                if matches!(self.nodes[id].op, Op::Leaf) {
                    let g = self.grads[id]
                        .get_or_insert_with(|| vec![0.0; self.nodes[id].value.as_slice().len()]);
                    for (gi, di) in g.iter_mut().zip(&dy) {
                        *gi += di;
                    }
                }
            }
        }

        // leaves untouched by this root still get a (zero) gradient buffer
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].requires_grad {
                self.grads[id]
                    .get_or_insert_with(|| vec![0.0; self.nodes[id].value.as_slice().len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Adds into a parent's adjoint iff that parent participates in
        // differentiation.
        macro_rules! acc {
            ($pid:expr, $f:expr) => {
                if self.nodes[$pid].requires_grad {
                    let buf = adj[$pid].get_or_insert_with(|| {
                        vec![0.0; self.nodes[$pid].value.as_slice().len()]
                    });
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf.as_mut_slice());
                }
            };
        }
        let val = |p: usize| self.nodes[p].value.as_slice();
        let out = self.nodes[id].value.as_slice();

        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                acc!(*a, |da: &mut [f64]| {
                    let bv = val(*b);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                acc!(*b, |db: &mut [f64]| {
                    let av = val(*a);
                    for p in 0..k {
                        for i in 0..m {
                            let apv = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += apv * dy[i * n + j];
                            }
                        }
                    }
                });
            }

            Op::MatmulTB { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                acc!(*a, |da: &mut [f64]| {
                    let bv = val(*b);
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += d * bv[j * k + p];
                            }
                        }
                    }
                });
                acc!(*b, |db: &mut [f64]| {
                    let av = val(*a);
                    for j in 0..n {
                        for i in 0..m {
                            let d = dy[i * n + j];
                            for p in 0..k {
                                db[j * k + p] += d * av[i * k + p];
                            }
                        }
                    }
                });
            }

            Op::MatVec { m, v } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                acc!(*m, |dm: &mut [f64]| {
                    let vv = val(*v);
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] += dy[i] * vv[j];
                        }
                    }
                });
                acc!(*v, |dv: &mut [f64]| {
                    let mv = val(*m);
                    for i in 0..r {
                        let d = dy[i];
                        for j in 0..c {
                            dv[j] += mv[i * c + j] * d;
                        }
                    }
                });
            }

            Op::TMatVec { m, v } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                acc!(*m, |dm: &mut [f64]| {
                    let uv = val(*v);
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] += uv[i] * dy[j];
                        }
                    }
                });
                acc!(*v, |du: &mut [f64]| {
                    let mv = val(*m);
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += mv[i * c + j] * dy[j];
                        }
                        du[i] += s;
                    }
                });
            }

            Op::Add { a, b } => {
                acc!(*a, |da: &mut [f64]| for (g, d) in da.iter_mut().zip(dy) { *g += d });
                acc!(*b, |db: &mut [f64]| for (g, d) in db.iter_mut().zip(dy) { *g += d });
            }

            Op::Mul { a, b } => {
                acc!(*a, |da: &mut [f64]| {
                    for ((g, d), bv) in da.iter_mut().zip(dy).zip(val(*b)) {
                        *g += d * bv;
                    }
                });
                acc!(*b, |db: &mut [f64]| {
                    for ((g, d), av) in db.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d * av;
                    }
                });
            }

            Op::Scale { x, c } => {
                acc!(*x, |dx: &mut [f64]| for (g, d) in dx.iter_mut().zip(dy) { *g += c * d });
            }

            Op::AddRowBroadcast { m, v } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                acc!(*m, |dm: &mut [f64]| for (g, d) in dm.iter_mut().zip(dy) { *g += d });
                acc!(*v, |dv: &mut [f64]| {
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] += dy[i * c + j];
                        }
                    }
                });
            }

            Op::Tanh { x } => {
                acc!(*x, |dx: &mut [f64]| {
                    for ((g, d), y) in dx.iter_mut().zip(dy).zip(out) {
                        *g += d * (1.0 - y * y);
                    }
                });
            }

            Op::Sigmoid { x } => {
                acc!(*x, |dx: &mut [f64]| {
                    for ((g, d), y) in dx.iter_mut().zip(dy).zip(out) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }

            Op::Exp { x } => {
                acc!(*x, |dx: &mut [f64]| {
                    for ((g, d), y) in dx.iter_mut().zip(dy).zip(out) {
                        *g += d * y;
                    }
                });
            }

            Op::Log { x } => {
                acc!(*x, |dx: &mut [f64]| {
                    for ((g, d), xv) in dx.iter_mut().zip(dy).zip(val(*x)) {
                        *g += d / xv;
                    }
                });
            }

            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.as_slice().len();
                    acc!(p, |dp: &mut [f64]| {
                        for (g, d) in dp.iter_mut().zip(&dy[offset..offset + len]) {
                            *g += d;
                        }
                    });
                    offset += len;
                }
            }

            Op::Slice { x, start } => {
                acc!(*x, |dx: &mut [f64]| {
                    for (g, d) in dx[*start..*start + dy.len()].iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }

            Op::SliceCols { m, start } => {
                let c = self.nodes[*m].shape[1];
                let len = self.nodes[id].shape[1];
                let r = self.nodes[id].shape[0];
                acc!(*m, |dm: &mut [f64]| {
                    for i in 0..r {
                        for j in 0..len {
                            dm[i * c + start + j] += dy[i * len + j];
                        }
                    }
                });
            }

            Op::Row { m, i } => {
                let c = self.nodes[*m].shape[1];
                acc!(*m, |dm: &mut [f64]| {
                    for (g, d) in dm[i * c..(i + 1) * c].iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }

            Op::Col { m, j } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                acc!(*m, |dm: &mut [f64]| {
                    for i in 0..r {
                        dm[i * c + j] += dy[i];
                    }
                });
            }

            Op::Index { v, i } => {
                acc!(*v, |dv: &mut [f64]| dv[*i] += dy[0]);
            }

            Op::StackRows { rows } => {
                let c = self.nodes[id].shape[1];
                for (r, &rid) in rows.iter().enumerate() {
                    acc!(rid, |dr: &mut [f64]| {
                        for (g, d) in dr.iter_mut().zip(&dy[r * c..(r + 1) * c]) {
                            *g += d;
                        }
                    });
                }
            }

            Op::SoftmaxRows { x } => {
                let (rows, cols) = match self.nodes[id].shape[..] {
                    [n] => (1, n),
                    [r, c] => (r, c),
                    _ => unreachable!("softmax output is 1-D or 2-D"),
                };
                acc!(*x, |dx: &mut [f64]| {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let d = &dy[r * cols..(r + 1) * cols];
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += d[j] * y[j];
                        }
                        for j in 0..cols {
                            dx[r * cols + j] += y[j] * (d[j] - dot);
                        }
                    }
                });
            }

            Op::LogSoftmaxRows { x } => {
                let (rows, cols) = match self.nodes[id].shape[..] {
                    [n] => (1, n),
                    [r, c] => (r, c),
                    _ => unreachable!("log-softmax output is 1-D or 2-D"),
                };
                acc!(*x, |dx: &mut [f64]| {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let d = &dy[r * cols..(r + 1) * cols];
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += d[j];
                        }
                        for j in 0..cols {
                            // exp(y_j) is the softmax; exactly 0 for masked entries
                            dx[r * cols + j] += d[j] - y[j].exp() * s;
                        }
                    }
                });
            }

            Op::LogSumExp { v } => {
                let s = out[0];
                acc!(*v, |dv: &mut [f64]| {
                    if s == f64::NEG_INFINITY {
                        return; // no probability mass anywhere; nothing to propagate
                    }
                    for (g, &xv) in dv.iter_mut().zip(val(*v)) {
                        *g += dy[0] * (xv - s).exp();
                    }
                });
            }

            Op::Sum { x } => {
                acc!(*x, |dx: &mut [f64]| for g in dx.iter_mut() { *g += dy[0] });
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::MatmulTB { .. } => "matmul_tb",
        Op::MatVec { .. } => "matvec",
        Op::TMatVec { .. } => "tmatvec",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddRowBroadcast { .. } => "add_row_broadcast",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::SliceCols { .. } => "slice_cols",
        Op::Row { .. } => "row",
        Op::Col { .. } => "col",
        Op::Index { .. } => "index",
        Op::StackRows { .. } => "stack_rows",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LogSoftmaxRows { .. } => "log_softmax_rows",
        Op::LogSumExp { .. } => "logsumexp",
        Op::Sum { .. } => "sum",
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Stable softmax of one row; `Err(())` when no entry is finite.
fn softmax_row(xs: &[f64], out: &mut [f64]) -> std::result::Result<(), ()> {
    let mut mx = f64::NEG_INFINITY;
    for &x in xs {
        if x > mx {
            mx = x;
        }
    }
    if mx == f64::NEG_INFINITY {
        return Err(());
    }
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - mx).exp();
        *o = e;
        s += e;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    Ok(())
}

fn logsumexp_slice(xs: &[f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for &x in xs {
        if x > mx {
            mx = x;
        }
    }
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if xs.len() == 1 {
        return xs[0];
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - mx).exp();
    }
    mx + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor_1d(data: Vec<f64>) -> Tensor {
        Tensor::vector(data).with_grad()
    }

    #[test]
    fn matmul_identity_is_exact() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(2, 3, vec![1.5, -2.0, 0.25, 4.0, 5.0, -6.5]).unwrap();
        let mut g = Graph::new();
        let (i, m) = (g.leaf(&eye), g.leaf(&a));
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out), a.data());
    }

    #[test]
    fn matmul_small_fixture() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let out = g.matmul(na, nb).unwrap();
        assert_eq!(g.value(out), &[3.0, 7.0]);
    }

    /// Independent reference with a different loop nest than the kernel.
    fn reference_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let want = reference_matmul(&a, &b, 3, 4, 2);
        let ta = Tensor::matrix(3, 4, a).unwrap();
        let tb = Tensor::matrix(4, 2, b).unwrap();
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&ta), g.leaf(&tb));
        let out = g.matmul(na, nb).unwrap();
        for (got, want) in g.value(out).iter().zip(&want) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_reports_both_shapes_on_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let err = g.matmul(na, nb).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "got: {err}");
    }

    #[test]
    fn variant_products_match_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tm = Tensor::matrix(3, 4, m.clone()).unwrap();
        let tv = Tensor::vector(v.clone());
        let tu = Tensor::vector(u.clone());

        let mut g = Graph::new();
        let (nm, nv, nu) = (g.leaf(&tm), g.leaf(&tv), g.leaf(&tu));
        let mv = g.matvec(nm, nv).unwrap();
        let tmv = g.tmatvec(nm, nu).unwrap();
        for i in 0..3 {
            let want: f64 = (0..4).map(|j| m[i * 4 + j] * v[j]).sum();
            assert!((g.value(mv)[i] - want).abs() < 1e-12);
        }
        for j in 0..4 {
            let want: f64 = (0..3).map(|i| m[i * 4 + j] * u[i]).sum();
            assert!((g.value(tmv)[j] - want).abs() < 1e-12);
        }

        // a · bᵀ against matmul with an explicitly transposed operand
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tb = Tensor::matrix(2, 4, b.clone()).unwrap();
        let mut bt = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                bt[j * 2 + i] = b[i * 4 + j];
            }
        }
        let tbt = Tensor::matrix(4, 2, bt).unwrap();
        let mut g2 = Graph::new();
        let (na, nb, nbt) = (g2.leaf(&tm), g2.leaf(&tb), g2.leaf(&tbt));
        let fused = g2.matmul_tb(na, nb).unwrap();
        let plain = g2.matmul(na, nbt).unwrap();
        for (x, y) in g2.value(fused).iter().zip(g2.value(plain)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unary_derivatives_match_central_differences() {
        // d tanh/dx at 0.3 against (tanh(0.3+h) - tanh(0.3-h)) / 2h
        let h = 1e-6;
        let x = tensor_1d(vec![0.3]);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let y = g.tanh(nx).unwrap();
        g.backward(y).unwrap();
        let fd = ((0.3f64 + h).tanh() - (0.3f64 - h).tanh()) / (2.0 * h);
        assert!((g.grad(nx).unwrap()[0] - fd).abs() < 1e-8);

        for (name, point) in [("sigmoid", -0.7), ("exp", 0.9), ("log", 1.7)] {
            let t = tensor_1d(vec![point]);
            let mut g = Graph::new();
            let nx = g.leaf(&t);
            let y = match name {
                "sigmoid" => g.sigmoid(nx).unwrap(),
                "exp" => g.exp(nx).unwrap(),
                _ => g.log(nx).unwrap(),
            };
            g.backward(y).unwrap();
            let f = |v: f64| match name {
                "sigmoid" => 1.0 / (1.0 + (-v).exp()),
                "exp" => v.exp(),
                _ => v.ln(),
            };
            let fd = (f(point + h) - f(point - h)) / (2.0 * h);
            assert!((g.grad(nx).unwrap()[0] - fd).abs() < 1e-8, "{name}");
        }
    }

    #[test]
    fn log_rejects_nonpositive() {
        let x = Tensor::vector(vec![1.0, 0.0]);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        assert!(matches!(g.log(nx), Err(Error::Domain { index: 1, .. })));
    }

    #[test]
    fn concat_joins_and_routes_gradient() {
        let a = tensor_1d(vec![1.0, 2.0]);
        let b = tensor_1d(vec![3.0]);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let cat = g.concat(&[na, nb]).unwrap();
        assert_eq!(g.value(cat), &[1.0, 2.0, 3.0]);
        let s = g.sum(cat).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(na).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(nb).unwrap(), &[1.0]);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = Tensor::vector(vec![1000.0, 1000.0]);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let y = g.softmax_rows(nx).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..15).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = Tensor::matrix(3, 5, data).unwrap();
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let y = g.softmax_rows(nx).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y)[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_masked_entries_get_zero_probability() {
        let x = Tensor::vector(vec![0.2, f64::NEG_INFINITY, 1.1]);
        let mut g = Graph::checked();
        let nx = g.leaf(&x);
        let y = g.softmax_rows(nx).unwrap();
        let v = g.value(y);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() <= 1e-12);

        // a single unmasked entry takes all the mass
        let one = Tensor::vector(vec![f64::NEG_INFINITY, -3.4, f64::NEG_INFINITY]);
        let mut g = Graph::new();
        let n1 = g.leaf(&one);
        let y1 = g.softmax_rows(n1).unwrap();
        assert_eq!(g.value(y1), &[0.0, 1.0, 0.0]);

        // fully masked row is degenerate
        let none = Tensor::vector(vec![f64::NEG_INFINITY; 2]);
        let mut g = Graph::new();
        let n0 = g.leaf(&none);
        assert!(g.softmax_rows(n0).is_err());
    }

    #[test]
    fn logsumexp_handles_extremes() {
        let x = Tensor::vector(vec![-1000.0, -1001.0]);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let y = g.logsumexp(nx).unwrap();
        let want = -1000.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((g.scalar_value(y).unwrap() - want).abs() <= 1e-12);

        // single entry is exact
        let s = Tensor::vector(vec![-123.456]);
        let mut g = Graph::new();
        let ns = g.leaf(&s);
        let ys = g.logsumexp(ns).unwrap();
        assert_eq!(g.scalar_value(ys).unwrap(), -123.456);

        // moderate values against the naive formula
        let m = Tensor::vector(vec![0.1, 1.2, -0.7]);
        let mut g = Graph::new();
        let nm = g.leaf(&m);
        let ym = g.logsumexp(nm).unwrap();
        let naive = (0.1f64.exp() + 1.2f64.exp() + (-0.7f64).exp()).ln();
        assert!((g.scalar_value(ym).unwrap() - naive).abs() <= 1e-12);

        // empty input is rejected
        let ev = Tensor::vector(vec![]);
        let mut g = Graph::new();
        let ne = g.leaf(&ev);
        assert!(g.logsumexp(ne).is_err());
    }

    #[test]
    fn product_rule_on_scalars() {
        let x = Tensor::scalar(3.0).with_grad();
        let y = Tensor::scalar(-0.5).with_grad();
        let mut g = Graph::new();
        let (nx, ny) = (g.leaf(&x), g.leaf(&y));
        let p = g.mul(nx, ny).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(nx).unwrap(), &[-0.5]);
        assert_eq!(g.grad(ny).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = Tensor::scalar(2.0).with_grad();
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let y = g.mul(nx, nx).unwrap(); // y = x², dy/dx = 4
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(nx).unwrap(), &[8.0]);
        g.zero_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(nx).unwrap(), &[4.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let x = Tensor::scalar(1.0).with_grad();
        let z = Tensor::vector(vec![5.0, 6.0]).with_grad();
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let nz = g.leaf(&z);
        let y = g.tanh(nx).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(nz).unwrap(), &[0.0, 0.0]);
    }

    /// Central-difference gradient of a scalar-valued closure.
    fn finite_diff(
        f: &dyn Fn(&[f64]) -> f64,
        at: &[f64],
        h: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; at.len()];
        let mut x = at.to_vec();
        for i in 0..at.len() {
            x[i] = at[i] + h;
            let up = f(&x);
            x[i] = at[i] - h;
            let down = f(&x);
            x[i] = at[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn chained_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |wd: &[f64], vd: &[f64]| -> f64 {
            let tw = Tensor::matrix(2, 3, wd.to_vec()).unwrap();
            let tv = Tensor::vector(vd.to_vec());
            let mut g = Graph::new();
            let (nw, nv) = (g.leaf(&tw), g.leaf(&tv));
            let mv = g.matvec(nw, nv).unwrap();
            let t = g.tanh(mv).unwrap();
            let s = g.sum(t).unwrap();
            g.scalar_value(s).unwrap()
        };

        let tw = Tensor::matrix(2, 3, w.clone()).unwrap().with_grad();
        let tv = Tensor::vector(v.clone()).with_grad();
        let mut g = Graph::new();
        let (nw, nv) = (g.leaf(&tw), g.leaf(&tv));
        let mv = g.matvec(nw, nv).unwrap();
        let t = g.tanh(mv).unwrap();
        let s = g.sum(t).unwrap();
        g.backward(s).unwrap();

        let wg = finite_diff(&|wd| run(wd, &v), &w, 1e-6);
        let vg = finite_diff(&|vd| run(&w, vd), &v, 1e-6);
        for (a, b) in g.grad(nw).unwrap().iter().zip(&wg) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in g.grad(nv).unwrap().iter().zip(&vg) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn checked_mode_rejects_overflow() {
        let x = Tensor::vector(vec![1000.0]);
        let mut g = Graph::checked();
        let nx = g.leaf(&x);
        assert!(matches!(g.exp(nx), Err(Error::NonFinite { .. })));

        // the same op succeeds unchecked, returning +inf
        let mut g2 = Graph::new();
        let nx2 = g2.leaf(&x);
        let y = g2.exp(nx2).unwrap();
        assert_eq!(g2.value(y)[0], f64::INFINITY);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = tensor_1d(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let y = g.tanh(nx).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // root = sum(tanh(slice_cols(M, 1, 2))) + M[2,0] + sum(row 1) + sum(col 3)
        let run = |md: &[f64]| -> f64 {
            let tm = Tensor::matrix(3, 4, md.to_vec()).unwrap();
            let mut g = Graph::new();
            let nm = g.leaf(&tm);
            let sc = g.slice_cols(nm, 1, 2).unwrap();
            let t = g.tanh(sc).unwrap();
            let s1 = g.sum(t).unwrap();
            let r = g.row(nm, 1).unwrap();
            let s2 = g.sum(r).unwrap();
            let c = g.col(nm, 3).unwrap();
            let s3 = g.sum(c).unwrap();
            let e = g.row(nm, 2).unwrap();
            let s4 = g.index(e, 0).unwrap();
            let a = g.add(s1, s2).unwrap();
            let b = g.add(s3, s4).unwrap();
            let root = g.add(a, b).unwrap();
            g.scalar_value(root).unwrap()
        };

        let tm = Tensor::matrix(3, 4, m.clone()).unwrap().with_grad();
        let mut g = Graph::new();
        let nm = g.leaf(&tm);
        let sc = g.slice_cols(nm, 1, 2).unwrap();
        let t = g.tanh(sc).unwrap();
        let s1 = g.sum(t).unwrap();
        let r = g.row(nm, 1).unwrap();
        let s2 = g.sum(r).unwrap();
        let c = g.col(nm, 3).unwrap();
        let s3 = g.sum(c).unwrap();
        let e = g.row(nm, 2).unwrap();
        let s4 = g.index(e, 0).unwrap();
        let a = g.add(s1, s2).unwrap();
        let b = g.add(s3, s4).unwrap();
        let root = g.add(a, b).unwrap();
        g.backward(root).unwrap();

        let fd = finite_diff(&|md| run(md), &m, 1e-6);
        for (a, b) in g.grad(nm).unwrap().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let ls = g.log_softmax_rows(nx).unwrap();
        let sm = g.softmax_rows(nx).unwrap();
        for (a, b) in g.value(ls).iter().zip(g.value(sm)) {
            assert!((a - b.ln()).abs() <= 1e-12);
        }
    }

    #[test]
    fn stack_rows_restores_structure_and_gradient() {
        let a = tensor_1d(vec![1.0, 2.0]);
        let b = tensor_1d(vec![3.0, 4.0]);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let m = g.stack_rows(&[na, nb]).unwrap();
        assert_eq!(g.shape(m), &[2, 2]);
        assert_eq!(g.value(m), &[1.0, 2.0, 3.0, 4.0]);
        let c = g.col(m, 1).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(na).unwrap(), &[0.0, 1.0]);
        assert_eq!(g.grad(nb).unwrap(), &[0.0, 1.0]);
    }
}
