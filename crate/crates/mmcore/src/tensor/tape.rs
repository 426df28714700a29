//! Wengert tape for reverse-mode differentiation.
//!
//! Operations execute eagerly and record themselves as tape nodes in
//! topological order; [`Tape::backward`] replays the nodes in reverse and
//! writes gradients back into the bound leaf tensors. One tape serves one
//! forward/backward pass and never crosses threads.
//!
//! Every operation validates that its output is finite, so a NaN anywhere
//! in a model surfaces as an error at the op that produced it instead of a
//! poisoned loss three modules later.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::params::SharedTensor;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Additive penalty used to realize attention masking: forbidden logits get
/// this before the row softmax, and the forbidden outputs are zeroed exactly
/// after normalization.
pub const MASK_PENALTY: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    AScalar,
    BScalar,
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum UnKind {
    Exp,
    Tanh,
    Relu,
    Ln,
}

enum Op {
    Leaf { bound: Option<SharedTensor> },
    Constant,
    Bin { kind: BinKind, a: usize, b: usize, bc: Bcast },
    Unary { kind: UnKind, a: usize },
    Scale { a: usize, c: f64 },
    Powf { a: usize, p: f64 },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    SumAll { a: usize },
    SumRows { a: usize, rows: usize, cols: usize },
    Gather { table: usize, ids: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<(usize, usize)>, cols: usize },
    SliceRows { a: usize, start: usize, len: usize, total_rows: usize, cols: usize },
    ConcatCols { parts: Vec<(usize, usize)>, rows: usize },
    SliceCols { a: usize, start: usize, len: usize, rows: usize, total_cols: usize },
    RepeatRows { a: usize, times: usize, rows: usize, cols: usize },
    SoftmaxRows { a: usize, rows: usize, cols: usize },
    RmsNormRows { a: usize, rows: usize, cols: usize, eps: f64 },
    CrossEntropy { logits: usize, rows: usize, cols: usize, targets: Vec<usize>, weights: Vec<f64>, wsum: f64 },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Recording tape. Create one per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    dedup: HashMap<*const RefCell<Tensor>, Var>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            dedup: HashMap::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// Tape that lifts every leaf as a constant. Used for evaluation-only
    /// passes (frozen conditioning, sampling) where gradients are wasted.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        let s = self.shape(v);
        if s.len() >= 2 {
            s[0]
        } else {
            1
        }
    }

    pub fn cols(&self, v: Var) -> usize {
        let s = self.shape(v);
        if s.len() >= 2 {
            s[1..].iter().product()
        } else {
            s[0]
        }
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        if self.nodes[v.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape(v)
            )));
        }
        Ok(self.nodes[v.0].data[0])
    }

    /// Copy a tape value out as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("tape values are finite by construction")
    }

    // ---- inputs ----

    /// Lift a shared tensor. Tracks gradients when the tensor requires them
    /// and the tape has gradients enabled. Lifting the same handle twice
    /// returns the same `Var`.
    pub fn leaf(&mut self, t: &SharedTensor) -> Var {
        let key = Rc::as_ptr(t);
        if let Some(&v) = self.dedup.get(&key) {
            return v;
        }
        let borrowed = t.borrow();
        let bound = if self.grad_enabled && borrowed.requires_grad() {
            Some(Rc::clone(t))
        } else {
            None
        };
        let v = self.push(
            Op::Leaf { bound },
            borrowed.shape().to_vec(),
            borrowed.data().to_vec(),
        );
        drop(borrowed);
        self.dedup.insert(key, v);
        v
    }

    /// Lift a plain tensor as a gradient-free constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Constant, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Op::Constant, vec![1], vec![value])
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert!(!self.consumed, "tape already consumed by backward");
        self.nodes.push(Node { op, shape, data });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, v: Var, op: &'static str) -> Result<Var> {
        if self.nodes[v.0].data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract(format!("non-finite output of {op}")));
        }
        Ok(v)
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
        let bc = if sa == sb {
            Bcast::None
        } else if na == 1 {
            Bcast::AScalar
        } else if nb == 1 {
            Bcast::BScalar
        } else {
            return Err(Error::Dimension { op: name, left: sa, right: sb });
        };
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let (shape, data) = {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            match bc {
                Bcast::None => (sa, da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()),
                Bcast::AScalar => (sb, db.iter().map(|&y| f(da[0], y)).collect()),
                Bcast::BScalar => (sa, da.iter().map(|&x| f(x, db[0])).collect()),
            }
        };
        let v = self.push(Op::Bin { kind, a: a.0, b: b.0, bc }, shape, data);
        self.check_finite(v, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    fn unary(&mut self, kind: UnKind, a: Var, name: &'static str) -> Result<Var> {
        let f = |x: f64| match kind {
            UnKind::Exp => x.exp(),
            UnKind::Tanh => x.tanh(),
            UnKind::Relu => x.max(0.0),
            UnKind::Ln => x.ln(),
        };
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let v = self.push(Op::Unary { kind, a: a.0 }, shape, data);
        self.check_finite(v, name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Exp, a, "exp")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Tanh, a, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Relu, a, "relu")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnKind::Ln, a, "ln")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let v = self.push(Op::Scale { a: a.0, c }, shape, data);
        self.check_finite(v, "scale")
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let data = self.nodes[a.0].data.iter().map(|&x| x.powf(p)).collect();
        let shape = self.shape(a).to_vec();
        let v = self.push(Op::Powf { a: a.0, p }, shape, data);
        self.check_finite(v, "powf")
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let v = self.push(Op::Matmul { a: a.0, b: b.0, m, k, n }, vec![m, n], out);
        self.check_finite(v, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose { a: a.0, rows: r, cols: c }, vec![c, r], out))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let v = self.push(Op::SumAll { a: a.0 }, vec![1], vec![s]);
        self.check_finite(v, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a 2-D value: [m x n] -> [m x 1].
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        let src = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let v = self.push(Op::SumRows { a: a.0, rows: r, cols: c }, vec![r, 1], data);
        self.check_finite(v, "sum_rows")
    }

    // ---- structure ----

    /// Row gather: out[i] = table[ids[i]]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = (self.rows(table), self.cols(table));
        if let Some(&bad) = ids.iter().find(|&&id| id >= r) {
            return Err(Error::Contract(format!("gather id {bad} out of {r} rows")));
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        Ok(self.push(
            Op::Gather { table: table.0, ids: ids.to_vec(), cols: c },
            vec![ids.len(), c],
            data,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.cols(parts[0]);
        let mut meta = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut total = 0usize;
        for &p in parts {
            if self.cols(p) != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: vec![cols],
                    right: vec![self.cols(p)],
                });
            }
            let r = self.rows(p);
            meta.push((p.0, r));
            data.extend_from_slice(&self.nodes[p.0].data);
            total += r;
        }
        Ok(self.push(Op::ConcatRows { parts: meta, cols }, vec![total, cols], data))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        if start + len > r || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let data = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        Ok(self.push(
            Op::SliceRows { a: a.0, start, len, total_rows: r, cols: c },
            vec![len, c],
            data,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.rows(parts[0]);
        let mut meta = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            if self.rows(p) != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: vec![rows],
                    right: vec![self.rows(p)],
                });
            }
            meta.push((p.0, self.cols(p)));
            total += self.cols(p);
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0usize;
        for &(idx, c) in &meta {
            let src = &self.nodes[idx].data;
            for i in 0..rows {
                data[i * total + off..i * total + off + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(Op::ConcatCols { parts: meta, rows }, vec![rows, total], data))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        if start + len > c || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of {c} cols",
                start + len
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(
            Op::SliceCols { a: a.0, start, len, rows: r, total_cols: c },
            vec![r, len],
            data,
        ))
    }

    /// Tile a [r x c] value `times` times along the row axis.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Contract("repeat_rows zero times".into()));
        }
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            data.extend_from_slice(&self.nodes[a.0].data);
        }
        Ok(self.push(
            Op::RepeatRows { a: a.0, times, rows: r, cols: c },
            vec![r * times, c],
            data,
        ))
    }

    // ---- structured numerics ----

    /// Row-wise softmax with optional attention mask. Forbidden positions
    /// receive an additive -MASK_PENALTY before normalization and exactly
    /// zero mass after it. Rows sum to one over the permitted positions.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&MaskMatrix>) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        if let Some(m) = mask {
            if m.rows() != r || m.cols() != c {
                return Err(Error::Dimension {
                    op: "softmax_rows",
                    left: vec![r, c],
                    right: vec![m.rows(), m.cols()],
                });
            }
            for i in 0..r {
                if !m.row_has_permitted(i) {
                    return Err(Error::FullyMaskedRow { row: i });
                }
            }
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let logit = |j: usize| {
                let forbidden = mask.map(|m| !m.permit(i, j)).unwrap_or(false);
                if forbidden {
                    row[j] - MASK_PENALTY
                } else {
                    row[j]
                }
            };
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                mx = mx.max(logit(j));
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = (logit(j) - mx).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
            if let Some(m) = mask {
                for j in 0..c {
                    if !m.permit(i, j) {
                        out[i * c + j] = 0.0;
                    }
                }
            }
        }
        let v = self.push(Op::SoftmaxRows { a: a.0, rows: r, cols: c }, vec![r, c], out);
        self.check_finite(v, "softmax_rows")
    }

    /// Row-wise RMS normalization: y = x / sqrt(mean(x^2) + eps).
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        let v = self.push(Op::RmsNormRows { a: a.0, rows: r, cols: c, eps }, vec![r, c], out);
        self.check_finite(v, "rms_norm_rows")
    }

    /// Fused stable cross-entropy: weighted mean over rows of
    /// -log softmax(logits)[target]. Weights select the supervised rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (r, c) = (self.rows(logits), self.cols(logits));
        if targets.len() != r || weights.len() != r {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![r],
                right: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("target id {bad} out of vocab {c}")));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Contract("no supervised positions".into()));
        }
        let src = &self.nodes[logits.0].data;
        let mut loss = 0.0;
        for i in 0..r {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        loss /= wsum;
        let v = self.push(
            Op::CrossEntropy {
                logits: logits.0,
                rows: r,
                cols: c,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                wsum,
            },
            vec![1],
            vec![loss],
        );
        self.check_finite(v, "cross_entropy")
    }

    /// Mean squared error against a constant target.
    pub fn mse_against(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.constant(target);
        if self.shape(pred) != self.shape(t) {
            return Err(Error::Dimension {
                op: "mse_against",
                left: self.shape(pred).to_vec(),
                right: self.shape(t).to_vec(),
            });
        }
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Writes `grad` into every bound
    /// leaf; leaves the loss's own gradient seeded at 1. A tape can run
    /// backward once; a second call is an error, as is a bound leaf that
    /// still holds a gradient from an earlier pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        // Write gradients into the bound leaves; untouched leaves get zeros.
        for idx in 0..n {
            if let Op::Leaf { bound: Some(t) } = &self.nodes[idx].op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.nodes[idx].data.len()]);
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Contract("non-finite gradient".into()));
                }
                t.borrow_mut().install_grad(g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let accum = |grads: &mut [Option<Vec<f64>>], parent: usize, contrib: &[f64]| {
            match &mut grads[parent] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                None => grads[parent] = Some(contrib.to_vec()),
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}

            Op::Bin { kind, a, b, bc } => {
                let da = &self.nodes[*a].data;
                let db = &self.nodes[*b].data;
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    BinKind::Add => match bc {
                        Bcast::None => (g.to_vec(), g.to_vec()),
                        Bcast::AScalar => (vec![g.iter().sum()], g.to_vec()),
                        Bcast::BScalar => (g.to_vec(), vec![g.iter().sum()]),
                    },
                    BinKind::Sub => match bc {
                        Bcast::None => (g.to_vec(), g.iter().map(|x| -x).collect()),
                        Bcast::AScalar => (vec![g.iter().sum()], g.iter().map(|x| -x).collect()),
                        Bcast::BScalar => (g.to_vec(), vec![-g.iter().sum::<f64>()]),
                    },
                    BinKind::Mul => match bc {
                        Bcast::None => (
                            g.iter().zip(db).map(|(x, y)| x * y).collect(),
                            g.iter().zip(da).map(|(x, y)| x * y).collect(),
                        ),
                        Bcast::AScalar => (
                            vec![g.iter().zip(db).map(|(x, y)| x * y).sum()],
                            g.iter().map(|x| x * da[0]).collect(),
                        ),
                        Bcast::BScalar => (
                            g.iter().map(|x| x * db[0]).collect(),
                            vec![g.iter().zip(da).map(|(x, y)| x * y).sum()],
                        ),
                    },
                };
                accum(grads, *a, &ga);
                accum(grads, *b, &gb);
            }

            Op::Unary { kind, a } => {
                let x = &self.nodes[*a].data;
                let y = &node.data;
                let ga: Vec<f64> = match kind {
                    UnKind::Exp => g.iter().zip(y).map(|(d, y)| d * y).collect(),
                    UnKind::Tanh => g.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect(),
                    UnKind::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect(),
                    UnKind::Ln => g.iter().zip(x).map(|(d, &x)| d / x).collect(),
                };
                accum(grads, *a, &ga);
            }

            Op::Scale { a, c } => {
                let ga: Vec<f64> = g.iter().map(|d| d * c).collect();
                accum(grads, *a, &ga);
            }

            Op::Powf { a, p } => {
                let x = &self.nodes[*a].data;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| d * p * x.powf(p - 1.0))
                    .collect();
                accum(grads, *a, &ga);
            }

            Op::Matmul { a, b, m, k, n } => {
                // dA = g . B^T ; dB = A^T . g
                let da_data = &self.nodes[*a].data;
                let db_data = &self.nodes[*b].data;
                let mut bt = vec![0.0; n * k];
                for i in 0..*k {
                    for j in 0..*n {
                        bt[j * k + i] = db_data[i * n + j];
                    }
                }
                let mut ga = vec![0.0; m * k];
                matmul_into(g, &bt, &mut ga, *m, *n, *k);
                accum(grads, *a, &ga);

                let mut at = vec![0.0; k * m];
                for i in 0..*m {
                    for j in 0..*k {
                        at[j * m + i] = da_data[i * k + j];
                    }
                }
                let mut gb = vec![0.0; k * n];
                matmul_into(&at, g, &mut gb, *k, *m, *n);
                accum(grads, *b, &gb);
            }

            Op::Transpose { a, rows, cols } => {
                // g has shape [cols x rows]; transpose it back.
                let mut ga = vec![0.0; rows * cols];
                for i in 0..*cols {
                    for j in 0..*rows {
                        ga[j * cols + i] = g[i * rows + j];
                    }
                }
                accum(grads, *a, &ga);
            }

            Op::SumAll { a } => {
                let ga = vec![g[0]; self.nodes[*a].data.len()];
                accum(grads, *a, &ga);
            }

            Op::SumRows { a, rows, cols } => {
                let mut ga = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        ga[i * cols + j] = g[i];
                    }
                }
                accum(grads, *a, &ga);
            }

            Op::Gather { table, ids, cols } => {
                let mut ga = vec![0.0; self.nodes[*table].data.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..*cols {
                        ga[id * cols + j] += g[row * cols + j];
                    }
                }
                accum(grads, *table, &ga);
            }

            Op::ConcatRows { parts, cols } => {
                let mut off = 0usize;
                for &(p, r) in parts {
                    accum(grads, p, &g[off..off + r * cols]);
                    off += r * cols;
                }
            }

            Op::SliceRows { a, start, len, total_rows, cols } => {
                let mut ga = vec![0.0; total_rows * cols];
                ga[start * cols..(start + len) * cols].copy_from_slice(g);
                accum(grads, *a, &ga);
            }

            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut off = 0usize;
                for &(p, c) in parts {
                    let mut gp = vec![0.0; rows * c];
                    for i in 0..*rows {
                        gp[i * c..(i + 1) * c]
                            .copy_from_slice(&g[i * total + off..i * total + off + c]);
                    }
                    accum(grads, p, &gp);
                    off += c;
                }
            }

            Op::SliceCols { a, start, len, rows, total_cols } => {
                let mut ga = vec![0.0; rows * total_cols];
                for i in 0..*rows {
                    ga[i * total_cols + start..i * total_cols + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accum(grads, *a, &ga);
            }

            Op::RepeatRows { a, times, rows, cols } => {
                let block = rows * cols;
                let mut ga = vec![0.0; block];
                for t in 0..*times {
                    for i in 0..block {
                        ga[i] += g[t * block + i];
                    }
                }
                accum(grads, *a, &ga);
            }

            Op::SoftmaxRows { a, rows, cols } => {
                // Forbidden outputs are exactly zero, so the standard VJP
                // sends them (and keeps them) at zero gradient.
                let y = &node.data;
                let mut ga = vec![0.0; rows * cols];
                for i in 0..*rows {
                    let base = i * cols;
                    let dot: f64 = (0..*cols).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..*cols {
                        ga[base + j] = y[base + j] * (g[base + j] - dot);
                    }
                }
                accum(grads, *a, &ga);
            }

            Op::RmsNormRows { a, rows, cols, eps } => {
                let x = &self.nodes[*a].data;
                let nf = *cols as f64;
                let mut ga = vec![0.0; rows * cols];
                for i in 0..*rows {
                    let base = i * cols;
                    let row = &x[base..base + cols];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / nf;
                    let r = 1.0 / (ms + eps).sqrt();
                    let r3 = r * r * r;
                    let dot: f64 = (0..*cols).map(|j| g[base + j] * row[j]).sum();
                    for j in 0..*cols {
                        ga[base + j] = r * g[base + j] - (r3 / nf) * row[j] * dot;
                    }
                }
                accum(grads, *a, &ga);
            }

            Op::CrossEntropy { logits, rows, cols, targets, weights, wsum } => {
                let x = &self.nodes[*logits].data;
                let scale = g[0] / wsum;
                let mut ga = vec![0.0; rows * cols];
                for i in 0..*rows {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let base = i * cols;
                    let row = &x[base..base + cols];
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..*cols {
                        let e = (row[j] - mx).exp();
                        ga[base + j] = e;
                        sum += e;
                    }
                    for j in 0..*cols {
                        ga[base + j] /= sum;
                    }
                    ga[base + targets[i]] -= 1.0;
                    for j in 0..*cols {
                        ga[base + j] *= scale * weights[i];
                    }
                }
                accum(grads, *logits, &ga);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::shared;

    fn leaf_of(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> (SharedTensor, Var) {
        let t = shared(Tensor::from_vec(shape, data).unwrap().with_grad());
        let v = tape.leaf(&t);
        (t, v)
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let z = tape.constant(&Tensor::zeros(vec![3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn relu_clamps() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn tanh_grad_at_zero_is_one() {
        let mut tape = Tape::new();
        let (t, x) = leaf_of(&mut tape, vec![1], vec![0.0]);
        let y = tape.tanh(x).unwrap();
        tape.backward(y).unwrap();
        assert!((t.borrow().grad().unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_loss_grad() {
        // loss = x^2 at x = 3 -> grad 6
        let mut tape = Tape::new();
        let (t, x) = leaf_of(&mut tape, vec![1], vec![3.0]);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(t.borrow().grad().unwrap(), &[6.0]);
    }

    #[test]
    fn matmul_sum_grad_is_ones_bt() {
        // loss = sum(A . B); dA = ones . B^T
        let mut tape = Tape::new();
        let (ta, a) = leaf_of(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(&Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        // ones(2x2) . B^T = [[11, 15], [11, 15]]
        assert_eq!(ta.borrow().grad().unwrap(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let (_t, x) = leaf_of(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_errors() {
        let mut tape = Tape::new();
        let (_t, x) = leaf_of(&mut tape, vec![1], vec![2.0]);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn grad_without_reset_errors_on_next_tape() {
        let t = shared(Tensor::from_vec(vec![1], vec![2.0]).unwrap().with_grad());
        for pass in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(&t);
            let y = tape.mul(x, x).unwrap();
            let res = tape.backward(y);
            if pass == 0 {
                res.unwrap();
            } else {
                assert!(matches!(res, Err(Error::GradNotReset)));
            }
        }
        // After a reset the pass succeeds again.
        t.borrow_mut().reset_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
    }

    #[test]
    fn leaf_dedup_accumulates_through_both_uses() {
        // loss = x * x via two separate lifts of the same handle.
        let t = shared(Tensor::from_vec(vec![1], vec![3.0]).unwrap().with_grad());
        let mut tape = Tape::new();
        let x1 = tape.leaf(&t);
        let x2 = tape.leaf(&t);
        assert_eq!(x1, x2);
        let y = tape.mul(x1, x2).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(t.borrow().grad().unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![1, 4]));
        let y = tape.softmax_rows(x, None).unwrap();
        for &v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_mask_single_column() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![1, 2]));
        let mut m = MaskMatrix::forbid_all(1, 2);
        m.set(0, 0, true);
        let y = tape.softmax_rows(x, Some(&m)).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_names_row() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![3, 2]));
        let mut m = MaskMatrix::permit_all(3, 2);
        m.set(1, 0, false);
        m.set(1, 1, false);
        match tape.softmax_rows(x, Some(&m)) {
            Err(Error::FullyMaskedRow { row }) => assert_eq!(row, 1),
            other => panic!("expected FullyMaskedRow, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::DetRng::new(11);
        let mut tape = Tape::new();
        let t = Tensor::randn(vec![3, 3], 2.0, &mut rng);
        let x = tape.constant(&t);
        let y = tape.softmax_rows(x, None).unwrap();
        for i in 0..3 {
            let s: f64 = tape.value(y)[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![3, 10]));
        let loss = tape
            .cross_entropy(x, &[1, 2, 3], &[1.0, 1.0, 1.0])
            .unwrap();
        assert!((tape.scalar(loss).unwrap() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(vec![1, 5]);
        t.data_mut()[2] = 50.0;
        let x = tape.constant(&t);
        let loss = tape.cross_entropy(x, &[2], &[1.0]).unwrap();
        assert!(tape.scalar(loss).unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_no_supervision_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![2, 4]));
        assert!(tape.cross_entropy(x, &[0, 1], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn non_finite_output_is_caught() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(vec![1], vec![-1.0]).unwrap());
        assert!(tape.ln(x).is_err());
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut rng = crate::rng::DetRng::new(5);
            let mut tape = Tape::new();
            let a = tape.constant(&Tensor::randn(vec![4, 4], 1.0, &mut rng));
            let b = tape.constant(&Tensor::randn(vec![4, 4], 1.0, &mut rng));
            let p = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(p, None).unwrap();
            tape.value(s).to_vec()
        };
        let x = run();
        let y = run();
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
