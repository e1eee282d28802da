use super::linalg::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddRowBias(Var, Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    DiagMean(Var),
    GroupMean {
        x: Var,
        group: usize,
        take: usize,
    },
    Interleave {
        a: Var,
        a_per: usize,
        b: Var,
        b_per: usize,
        broadcast: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gelu(_) => "gelu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::DiagMean(_) => "diag_mean",
            Op::GroupMean { .. } => "group_mean",
            Op::Interleave { .. } => "interleave",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only tape of tensor operations.
///
/// Node order is a topological order, so [`Graph::backward`] is a single
/// reverse sweep. One graph belongs to one thread; build a fresh graph per
/// training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached from the loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Iteration helpers for reductions along an axis of a rows × cols matrix.
/// Axis 1 reduces within each row, axis 0 within each column.
#[derive(Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    cols: usize,
    axis: usize,
}

impl Lanes {
    fn new(rows: usize, cols: usize, axis: usize) -> Self {
        if axis == 1 {
            Self {
                count: rows,
                len: cols,
                cols,
                axis,
            }
        } else {
            Self {
                count: cols,
                len: rows,
                cols,
                axis,
            }
        }
    }

    #[inline]
    fn at(&self, lane: usize, j: usize) -> usize {
        if self.axis == 1 {
            lane * self.cols + j
        } else {
            j * self.cols + lane
        }
    }
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::Invalid(format!(
            "axis {axis} out of range for a matrix"
        )));
    }
    Ok(())
}

/// `tanh(c·(v + k·v³))` through a single `exp`.
#[inline]
fn gelu_tanh(v: f64) -> f64 {
    let u = GELU_C * (v + GELU_K * v * v * v);
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {}",
            op.name()
        );
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.require_matrix(op)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a constant input. Its adjoint is still available from
    /// [`Graph::gradients`], which is what gradient checks use.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(x)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        self.same_shape(a, b, name)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// Multiplies every entry of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape(
                "mul_scalar",
                self.value(x).shape(),
                self.value(s).shape(),
            ));
        }
        let c = self.value(s).item();
        Ok(self.map(x, Op::MulScalar(x, s), |v| v * c))
    }

    /// `x + 1ᵀb` for `x: m × n`, `b: 1 × n`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "add_row_bias")?;
        let bs = self.value(b).shape();
        if self.value(b).numel() != n || bs.len() != 2 || bs[0] != 1 {
            return Err(Error::shape("add_row_bias", &[m, n], bs));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            add_into(row, bias);
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRowBias(x, b)))
    }

    /// Concatenates along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        check_axis(axis)?;
        let first = *xs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let (r0, c0) = self.mat(first, "concat")?;
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.mat(x, "concat")?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(Error::shape("concat", &[r0, c0], &[r, c]));
            }
            total += if axis == 0 { r } else { c };
        }
        let (rows, cols) = if axis == 0 { (total, c0) } else { (r0, total) };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &x in xs {
                out.extend_from_slice(self.data(x));
            }
        } else {
            for i in 0..r0 {
                for &x in xs {
                    out.extend_from_slice(self.value(x).row(i));
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::Concat(xs.to_vec(), axis),
        ))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        check_axis(axis)?;
        let (r, c) = self.mat(x, "slice")?;
        let extent = if axis == 0 { r } else { c };
        if start >= end || end > extent {
            return Err(Error::shape("slice", &[r, c], &[start, end]));
        }
        let src = self.data(x);
        let (rows, cols, out) = if axis == 0 {
            (end - start, c, src[start * c..end * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + end]);
            }
            (r, end - start, out)
        };
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::Slice { x, axis, start },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| 0.5 * v * (1.0 + gelu_tanh(v)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// Normalizes each row to zero mean / unit variance (ε = 1e-5), then
    /// applies `gain` and `bias` (both `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(Error::shape("layer_norm", &[m, n], self.value(p).shape()));
            }
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::matrix(m, n, out)?, op))
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Result<Tensor> {
        check_axis(axis)?;
        let (m, n) = self.mat(x, "softmax")?;
        let lanes = Lanes::new(m, n, axis);
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for l in 0..lanes.count {
            let max = (0..lanes.len)
                .map(|j| src[lanes.at(l, j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..lanes.len)
                .map(|j| (src[lanes.at(l, j)] - max).exp())
                .sum();
            let lse = max + sum.ln();
            for j in 0..lanes.len {
                let idx = lanes.at(l, j);
                out[idx] = if log {
                    src[idx] - lse
                } else {
                    (src[idx] - max).exp() / sum
                };
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_values(x, axis, false)?;
        Ok(self.push(t, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_values(x, axis, true)?;
        Ok(self.push(t, Op::LogSoftmax(x, axis)))
    }

    /// Scales every row to unit ℓ2 norm; a zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "normalize_rows")?;
        let src = self.data(x);
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "row {i} has norm {norm}; cannot normalize"
                )));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::NormalizeRows { x, norms }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean of the diagonal of a square matrix.
    pub fn diag_mean(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "diag_mean")?;
        if m != n {
            return Err(Error::shape("diag_mean", &[m, n], &[m, m]));
        }
        let d = self.data(x);
        let s = (0..m).map(|i| d[i * n + i]).sum::<f64>() / m as f64;
        Ok(self.push(Tensor::scalar(s), Op::DiagMean(x)))
    }

    /// Splits rows into consecutive groups of `group` and averages the first
    /// `take` rows of each group. Output has one row per group.
    pub fn group_mean(&mut self, x: Var, group: usize, take: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "group_mean")?;
        if group == 0 || take == 0 || take > group || m % group != 0 {
            return Err(Error::shape("group_mean", &[m, n], &[group, take]));
        }
        let groups = m / group;
        let src = self.data(x);
        let mut out = vec![0.0; groups * n];
        let w = 1.0 / take as f64;
        for g in 0..groups {
            let dst = &mut out[g * n..(g + 1) * n];
            for t in 0..take {
                let r = g * group + t;
                add_into(dst, &src[r * n..(r + 1) * n]);
            }
            dst.iter_mut().for_each(|v| *v *= w);
        }
        let op = Op::GroupMean { x, group, take };
        Ok(self.push(Tensor::matrix(groups, n, out)?, op))
    }

    /// Builds groups of `a_per` rows from `a` followed by `b_per` rows from
    /// `b`. When `b` has exactly `b_per` rows it is repeated for every group.
    pub fn interleave(&mut self, a: Var, a_per: usize, b: Var, b_per: usize) -> Result<Var> {
        let (ma, n) = self.mat(a, "interleave")?;
        let (mb, nb) = self.mat(b, "interleave")?;
        if a_per == 0 || ma % a_per != 0 || nb != n {
            return Err(Error::shape("interleave", &[ma, n], &[mb, nb]));
        }
        let groups = ma / a_per;
        let broadcast = mb == b_per;
        if !broadcast && mb != groups * b_per {
            return Err(Error::shape("interleave", &[ma, n], &[mb, nb]));
        }
        let (sa, sb) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity((ma + groups * b_per) * n);
        for g in 0..groups {
            out.extend_from_slice(&sa[g * a_per * n..(g + 1) * a_per * n]);
            let off = if broadcast { 0 } else { g * b_per * n };
            out.extend_from_slice(&sb[off..off + b_per * n]);
        }
        let rows = groups * (a_per + b_per);
        let op = Op::Interleave {
            a,
            a_per,
            b,
            b_per,
            broadcast,
        };
        Ok(self.push(Tensor::matrix(rows, n, out)?, op))
    }

    /// Scaled dot-product multi-head attention within groups of `seq`
    /// consecutive rows. `q`, `k`, `v` are `(groups·seq) × D`; each head sees
    /// a contiguous `D / heads` slice of the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (m, d) = self.mat(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        if seq == 0 || m % seq != 0 {
            return Err(Error::shape("attention", &[m, d], &[seq]));
        }
        let groups = m / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; groups * heads * seq * seq];
        let mut out = vec![0.0; m * d];
        let mut scores = vec![0.0; seq];
        for g in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(g * seq + i) * d + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(g * seq + j) * d + col..][..dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let p_off = ((g * heads + h) * seq + i) * seq;
                    let oi = &mut out[(g * seq + i) * d + col..][..dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / sum;
                        probs[p_off + j] = p;
                        let vj = &vd[(g * seq + j) * d + col..][..dh];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            seq,
            heads,
            probs,
        };
        Ok(self.push(Tensor::matrix(m, d, out)?, op))
    }

    /// Reverse sweep from a scalar `loss`, returning adjoints of every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse sweep that also accumulates parameter adjoints into `store`.
    /// Gradients are added, so call [`ParamStore::zero_grads`] between steps.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                add_into(store.grad_mut(*id).data_mut(), g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                acc(*a, &|da| {
                    gemm(m, n, k, g, false, self.data(*b), true, 1.0, da)
                });
                acc(*b, &|db| {
                    gemm(k, m, n, self.data(*a), true, g, false, 1.0, db)
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                acc(*x, &|dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|da| add_into(da, g));
                acc(*b, &|db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|da| add_into(da, g));
                acc(*b, &|db| db.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &|da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(*b, &|db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|dx| {
                dx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
            }),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                let xv = self.data(*x);
                acc(*x, &|dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi)
                });
                let ds: f64 = g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum();
                acc(*s, &|d| d[0] += ds);
            }
            Op::AddRowBias(x, b) => {
                let n = self.value(*b).numel();
                acc(*x, &|dx| add_into(dx, g));
                acc(*b, &|db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let cols = node.value.cols();
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = (self.value(x).rows(), self.value(x).cols());
                    if *axis == 0 {
                        acc(x, &|dx| {
                            add_into(dx, &g[offset * cols..(offset + r) * cols])
                        });
                        offset += r;
                    } else {
                        acc(x, &|dx| {
                            for i in 0..r {
                                add_into(&mut dx[i * c..(i + 1) * c], &g[i * cols + offset..][..c]);
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let c = self.value(*x).cols();
                let (r_out, c_out) = (node.value.rows(), node.value.cols());
                acc(*x, &|dx| {
                    if *axis == 0 {
                        add_into(&mut dx[start * c..(start + r_out) * c], g);
                    } else {
                        for i in 0..r_out {
                            add_into(&mut dx[i * c + start..][..c_out], &g[i * c_out..][..c_out]);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                acc(*x, &|dx| {
                    for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        let t = gelu_tanh(v);
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *d += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &|dx| {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - y * y);
                }
            }),
            Op::Exp(x) => acc(*x, &|dx| {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gv = self.data(*gain);
                acc(*gain, &|dg| {
                    for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                });
                acc(*bias, &|db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
                acc(*x, &|dx| {
                    let mut dh = vec![0.0; n];
                    for (i, (row_g, row_h)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = row_g[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh =
                            dh.iter().zip(row_h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let dst = &mut dx[i * n..(i + 1) * n];
                        for j in 0..n {
                            dst[j] += rstd[i] * (dh[j] - mean_dh - row_h[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let lanes = Lanes::new(node.value.rows(), node.value.cols(), *axis);
                acc(*x, &|dx| {
                    for l in 0..lanes.count {
                        let dot: f64 = (0..lanes.len)
                            .map(|j| g[lanes.at(l, j)] * out[lanes.at(l, j)])
                            .sum();
                        for j in 0..lanes.len {
                            let idx = lanes.at(l, j);
                            dx[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let lanes = Lanes::new(node.value.rows(), node.value.cols(), *axis);
                acc(*x, &|dx| {
                    for l in 0..lanes.count {
                        let total: f64 = (0..lanes.len).map(|j| g[lanes.at(l, j)]).sum();
                        for j in 0..lanes.len {
                            let idx = lanes.at(l, j);
                            dx[idx] += g[idx] - out[idx].exp() * total;
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.cols();
                acc(*x, &|dx| {
                    for (i, norm) in norms.iter().enumerate() {
                        let y = &out[i * n..(i + 1) * n];
                        let gy = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] += (gy[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let w = g[0] / self.value(*x).numel() as f64;
                acc(*x, &|dx| dx.iter_mut().for_each(|d| *d += w));
            }
            Op::DiagMean(x) => {
                let n = self.value(*x).cols();
                let w = g[0] / n as f64;
                acc(*x, &|dx| (0..n).for_each(|i| dx[i * n + i] += w));
            }
            Op::GroupMean { x, group, take } => {
                let n = node.value.cols();
                let w = 1.0 / *take as f64;
                acc(*x, &|dx| {
                    for (gi, row_g) in g.chunks(n).enumerate() {
                        for t in 0..*take {
                            let r = gi * group + t;
                            for j in 0..n {
                                dx[r * n + j] += w * row_g[j];
                            }
                        }
                    }
                });
            }
            Op::Interleave {
                a,
                a_per,
                b,
                b_per,
                broadcast,
            } => {
                let n = node.value.cols();
                let per = a_per + b_per;
                let groups = node.value.rows() / per;
                acc(*a, &|da| {
                    for gi in 0..groups {
                        let src = &g[gi * per * n..][..a_per * n];
                        add_into(&mut da[gi * a_per * n..][..a_per * n], src);
                    }
                });
                acc(*b, &|db| {
                    for gi in 0..groups {
                        let src = &g[(gi * per + a_per) * n..][..b_per * n];
                        let off = if *broadcast { 0 } else { gi * b_per * n };
                        add_into(&mut db[off..off + b_per * n], src);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *seq, *heads, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (m, d) = (self.value(q).rows(), self.value(q).cols());
        let groups = m / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; m * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut dp = vec![0.0; seq];
        for gr in 0..groups {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let ri = (gr * seq + i) * d + col;
                    let go = &g[ri..ri + dh];
                    let p = &probs[((gr * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..seq {
                        let rj = (gr * seq + j) * d + col;
                        dp[j] = go.iter().zip(&vd[rj..rj + dh]).map(|(a, b)| a * b).sum();
                        for (dvv, gg) in dv[rj..rj + dh].iter_mut().zip(go) {
                            *dvv += p[j] * gg;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let rj = (gr * seq + j) * d + col;
                        for t in 0..dh {
                            dq[ri + t] += ds * kd[rj + t];
                            dk[rj + t] += ds * qd[ri + t];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            match grads[var.0].as_mut() {
                Some(slot) => add_into(slot, &delta),
                None => grads[var.0] = Some(delta),
            }
        }
    }
}
