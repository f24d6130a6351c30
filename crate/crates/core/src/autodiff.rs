//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A [`Tape`] records every primitive operation of one forward pass in
//! execution order (define-by-run, so the record is already topologically
//! sorted). [`Tape::backward`] replays the record in reverse, accumulating
//! vector-Jacobian products into every node reachable from the loss.
//! Tapes are rebuilt per forward pass; distinct tapes may live on distinct
//! threads, a single tape is single-threaded.
//!
//! Everything is 64-bit. The op set is exactly what the dynamics model and
//! the point-cloud losses need: matmul, bias add, concat/slice/gather,
//! row softmax, log-sum-exp, layer norm, GELU/ReLU, reductions, per-row
//! min with deterministic tie-break, and pairwise Euclidean distances.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddConst(ValueId),
    MatMul(ValueId, ValueId),
    AddBias(ValueId, ValueId),
    Transpose(ValueId),
    ConcatLast(Vec<ValueId>),
    SliceCols(ValueId, usize, usize),
    GatherRows(ValueId, Vec<usize>),
    OverwriteRows(ValueId, Vec<usize>),
    Relu(ValueId),
    Gelu(ValueId),
    Ln(ValueId),
    SoftmaxLast(ValueId),
    LseLast(ValueId),
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId },
    ReduceSum(ValueId),
    ReduceMean(ValueId),
    MinLast(ValueId, Vec<usize>),
    PairDist(ValueId, ValueId),
}

struct Node {
    data: Tensor,
    op: Op,
    /// Whether any differentiable leaf feeds this node; backward skips
    /// gradient accumulation into nodes that don't need it.
    needs_grad: bool,
}

/// Gradients of one scalar loss with respect to every tape node.
///
/// Leaves unreachable from the loss report zeros of the leaf's shape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`, zeros if the node was unreachable.
    pub fn wrt(&self, id: ValueId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn is_reached(&self, id: ValueId) -> bool {
        self.grads[id.0].is_some()
    }
}

const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].data
    }

    /// Differentiable input (a parameter or anything gradients are wanted for).
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.nodes.push(Node {
            data: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Non-differentiable input (data, targets, commanded kinematics).
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.nodes.push(Node {
            data: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, data: Tensor) -> ValueId {
        let needs_grad = inputs_of(&op).iter().any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            data,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].data.shape()
    }

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        self.same_shape("add", a, b)?;
        let out = self.nodes[a.0].data.zip(&self.nodes[b.0].data, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.nodes[a.0].data.zip(&self.nodes[b.0].data, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.nodes[a.0].data.zip(&self.nodes[b.0].data, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId, AutodiffError> {
        let out = self.nodes[a.0].data.map(|x| x * c);
        Ok(self.push(Op::Scale(a, c), out))
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> Result<ValueId, AutodiffError> {
        let out = self.nodes[a.0].data.map(|x| x + c);
        Ok(self.push(Op::AddConst(a), out))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let out = self.nodes[a.0].data.matmul(&self.nodes[b.0].data);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Broadcast-add a length-d bias row to every row of an n-by-d matrix.
    pub fn add_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", sx, sb),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let mut data = self.nodes[x.0].data.data().to_vec();
        let bias = self.nodes[b.0].data.data();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += bias[j];
            }
        }
        Ok(self.push(Op::AddBias(x, b), Tensor::new(&[n, d], data)))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        if self.shape(a).len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", self.shape(a)),
            });
        }
        let out = self.nodes[a.0].data.transpose2();
        Ok(self.push(Op::Transpose(a), out))
    }

    /// Concatenate along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[ValueId]) -> Result<ValueId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidInput("concat of zero tensors".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product::<usize>().max(1);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_last",
                    detail: format!("{:?} vs leading {:?}", s, lead),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.nodes[p.0].data.data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Op::ConcatLast(parts.to_vec()), Tensor::new(&shape, data)))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: ValueId, start: usize, end: usize) -> Result<ValueId, AutodiffError> {
        let s = self.shape(a);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("[{}, {}) of {:?}", start, end, s),
            });
        }
        let (n, m, w) = (s[0], s[1], end - start);
        let src = self.nodes[a.0].data.data();
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * m + start..i * m + end]);
        }
        Ok(self.push(Op::SliceCols(a, start, end), Tensor::new(&[n, w], data)))
    }

    /// Select rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: ValueId, rows: &[usize]) -> Result<ValueId, AutodiffError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("{:?}", s),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(AutodiffError::InvalidInput(format!(
                "gather_rows index {} out of {} rows",
                bad, s[0]
            )));
        }
        let (m, src) = (s[1], self.nodes[a.0].data.data());
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(&src[r * m..(r + 1) * m]);
        }
        Ok(self.push(
            Op::GatherRows(a, rows.to_vec()),
            Tensor::new(&[rows.len(), m], data),
        ))
    }

    /// Replace the given rows with fixed (non-differentiated) values.
    ///
    /// Gradients flow through untouched rows only; overwritten rows are
    /// kinematic boundary conditions, not predictions.
    pub fn overwrite_rows(
        &mut self,
        a: ValueId,
        rows: &[usize],
        values: &Tensor,
    ) -> Result<ValueId, AutodiffError> {
        let s = self.shape(a);
        if s.len() != 2 || values.shape() != [rows.len(), s[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "overwrite_rows",
                detail: format!("{:?} with {} rows of {:?}", s, rows.len(), values.shape()),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(AutodiffError::InvalidInput(format!(
                "overwrite_rows index {} out of {} rows",
                bad, s[0]
            )));
        }
        let m = s[1];
        let mut data = self.nodes[a.0].data.data().to_vec();
        for (k, &r) in rows.iter().enumerate() {
            data[r * m..(r + 1) * m].copy_from_slice(&values.data()[k * m..(k + 1) * m]);
        }
        Ok(self.push(
            Op::OverwriteRows(a, rows.to_vec()),
            Tensor::new(s.to_vec().as_slice(), data),
        ))
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        let out = self.nodes[a.0].data.map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(Op::Relu(a), out))
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        let out = self.nodes[a.0].data.map(gelu);
        Ok(self.push(Op::Gelu(a), out))
    }

    pub fn ln(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        let out = self.nodes[a.0].data.map(f64::ln);
        Ok(self.push(Op::Ln(a), out))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        let t = &self.nodes[a.0].data;
        if t.rank() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_last",
                detail: "scalar input".into(),
            });
        }
        let w = t.last_axis();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Op::SoftmaxLast(a), Tensor::new(&shape, data)))
    }

    /// log(sum(exp(x))) along the last axis; drops that axis.
    pub fn lse_last(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        let t = &self.nodes[a.0].data;
        if t.rank() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "lse_last",
                detail: "scalar input".into(),
            });
        }
        let w = t.last_axis();
        let rows = t.rows_of_last_axis();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * w..(r + 1) * w];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            data.push(m + s.ln());
        }
        let shape = t.shape()[..t.rank() - 1].to_vec();
        Ok(self.push(Op::LseLast(a), Tensor::new(&shape, data)))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
    ) -> Result<ValueId, AutodiffError> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        if sx.len() != 2 || sg != [sx[1]] || sb != [sx[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gain {:?}, bias {:?}", sx, sg, sb),
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let xs = self.nodes[x.0].data.data();
        let g = self.nodes[gain.0].data.data();
        let b = self.nodes[bias.0].data.data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, Tensor::new(&[n, d], data)))
    }

    pub fn reduce_sum(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        let s: f64 = self.nodes[a.0].data.data().iter().sum();
        Ok(self.push(Op::ReduceSum(a), Tensor::scalar(s)))
    }

    pub fn reduce_mean(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        let n = self.nodes[a.0].data.numel();
        if n == 0 {
            return Err(AutodiffError::InvalidInput("mean of empty tensor".into()));
        }
        let s: f64 = self.nodes[a.0].data.data().iter().sum::<f64>() / n as f64;
        Ok(self.push(Op::ReduceMean(a), Tensor::scalar(s)))
    }

    /// Minimum along the last axis with lowest-index tie-break; drops
    /// that axis. The subgradient routes to the selected entry only.
    pub fn min_last(&mut self, a: ValueId) -> Result<ValueId, AutodiffError> {
        let t = &self.nodes[a.0].data;
        if t.rank() == 0 || t.last_axis() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "min_last",
                detail: format!("{:?}", t.shape()),
            });
        }
        let w = t.last_axis();
        let rows = t.rows_of_last_axis();
        let mut data = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * w..(r + 1) * w];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            arg.push(best);
        }
        let shape = t.shape()[..t.rank() - 1].to_vec();
        Ok(self.push(Op::MinLast(a, arg), Tensor::new(&shape, data)))
    }

    /// Pairwise Euclidean distances between two point lists:
    /// `(n x 3, m x 3) -> n x m`. The gradient at coincident points
    /// (zero distance) is defined as zero.
    pub fn pair_dist(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != 3 || sb[1] != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "pair_dist",
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let (n, m) = (sa[0], sb[0]);
        let (pa, pb) = (self.nodes[a.0].data.data(), self.nodes[b.0].data.data());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let dx = pa[i * 3] - pb[j * 3];
                let dy = pa[i * 3 + 1] - pb[j * 3 + 1];
                let dz = pa[i * 3 + 2] - pb[j * 3 + 2];
                data[i * m + j] = (dx * dx + dy * dy + dz * dz).sqrt();
            }
        }
        Ok(self.push(Op::PairDist(a, b), Tensor::new(&[n, m], data)))
    }

    /// Accumulate gradients of a scalar loss into every reachable node.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients, AutodiffError> {
        let numel = self.nodes[loss.0].data.numel();
        if numel != 1 {
            return Err(AutodiffError::NonScalarLoss { numel });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let seed_shape = self.nodes[loss.0].data.shape().to_vec();
        grads[loss.0] = Some(Tensor::new(&seed_shape, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.data.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_inplace(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = g.zip(&self.nodes[b.0].data, |gv, bv| gv * bv);
                let db = g.zip(&self.nodes[a.0].data, |gv, av| gv * av);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|v| v * c)),
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let bt = self.nodes[b.0].data.transpose2();
                let at = self.nodes[a.0].data.transpose2();
                self.acc(grads, *a, g.matmul(&bt));
                self.acc(grads, *b, at.matmul(g));
            }
            Op::AddBias(x, b) => {
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let mut db = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g.data()[i * d + j];
                    }
                }
                self.acc(grads, *x, g.clone());
                self.acc(grads, *b, Tensor::new(&[d], db));
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose2()),
            Op::ConcatLast(parts) => {
                let rows = g.rows_of_last_axis();
                let total = g.last_axis();
                let mut off = 0;
                for &p in parts {
                    let s = self.shape(p).to_vec();
                    let w = *s.last().unwrap();
                    let mut data = vec![0.0; rows * w];
                    for r in 0..rows {
                        data[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    self.acc(grads, p, Tensor::new(&s, data));
                    off += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let s = self.shape(*a).to_vec();
                let (n, m, w) = (s[0], s[1], end - start);
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    data[i * m + start..i * m + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.acc(grads, *a, Tensor::new(&s, data));
            }
            Op::GatherRows(a, rows) => {
                let s = self.shape(*a).to_vec();
                let m = s[1];
                let mut data = vec![0.0; s[0] * m];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        data[r * m + j] += g.data()[k * m + j];
                    }
                }
                self.acc(grads, *a, Tensor::new(&s, data));
            }
            Op::OverwriteRows(a, rows) => {
                let s = self.shape(*a).to_vec();
                let m = s[1];
                let mut data = g.data().to_vec();
                for &r in rows {
                    for j in 0..m {
                        data[r * m + j] = 0.0;
                    }
                }
                self.acc(grads, *a, Tensor::new(&s, data));
            }
            Op::Relu(a) => {
                let da = g.zip(&self.nodes[a.0].data, |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.acc(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g.zip(&self.nodes[a.0].data, |gv, x| gv * gelu_deriv(x));
                self.acc(grads, *a, da);
            }
            Op::Ln(a) => {
                let da = g.zip(&self.nodes[a.0].data, |gv, x| gv / x);
                self.acc(grads, *a, da);
            }
            Op::SoftmaxLast(a) => {
                let y = &node.data;
                let w = y.last_axis();
                let rows = y.rows_of_last_axis();
                let mut data = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let gr = &g.data()[r * w..(r + 1) * w];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..w {
                        data[r * w + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(&y.shape().to_vec(), data));
            }
            Op::LseLast(a) => {
                let x = &self.nodes[a.0].data;
                let w = x.last_axis();
                let rows = x.rows_of_last_axis();
                let mut data = vec![0.0; x.numel()];
                for r in 0..rows {
                    let row = &x.data()[r * w..(r + 1) * w];
                    let lse = node.data.data()[r];
                    let gr = g.data()[r];
                    for j in 0..w {
                        data[r * w + j] = gr * (row[j] - lse).exp();
                    }
                }
                self.acc(grads, *a, Tensor::new(&x.shape().to_vec(), data));
            }
            Op::LayerNorm { x, gain, bias } => {
                let xs = &self.nodes[x.0].data;
                let gv = self.nodes[gain.0].data.data();
                let (n, d) = (xs.shape()[0], xs.shape()[1]);
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..n {
                    let row = &xs.data()[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // h = upstream grad through the gain; xhat = normalized row
                    let mut h_mean = 0.0;
                    let mut hx_mean = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let h = gr[j] * gv[j];
                        h_mean += h;
                        hx_mean += h * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    h_mean /= d as f64;
                    hx_mean /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        dx[i * d + j] = inv * (gr[j] * gv[j] - h_mean - xhat * hx_mean);
                    }
                }
                self.acc(grads, *x, Tensor::new(&[n, d], dx));
                self.acc(grads, *gain, Tensor::new(&[d], dgain));
                self.acc(grads, *bias, Tensor::new(&[d], dbias));
            }
            Op::ReduceSum(a) => {
                let s = self.shape(*a).to_vec();
                let gv = g.item();
                self.acc(grads, *a, Tensor::new(&s, vec![gv; s.iter().product()]));
            }
            Op::ReduceMean(a) => {
                let s = self.shape(*a).to_vec();
                let n: usize = s.iter().product();
                let gv = g.item() / n as f64;
                self.acc(grads, *a, Tensor::new(&s, vec![gv; n]));
            }
            Op::MinLast(a, arg) => {
                let s = self.shape(*a).to_vec();
                let w = *s.last().unwrap();
                let mut data = vec![0.0; s.iter().product()];
                for (r, &j) in arg.iter().enumerate() {
                    data[r * w + j] += g.data()[r];
                }
                self.acc(grads, *a, Tensor::new(&s, data));
            }
            Op::PairDist(a, b) => {
                let pa = self.nodes[a.0].data.data();
                let pb = self.nodes[b.0].data.data();
                let d = node.data.data();
                let (n, m) = (self.shape(*a)[0], self.shape(*b)[0]);
                let mut da = vec![0.0; n * 3];
                let mut db = vec![0.0; m * 3];
                for i in 0..n {
                    for j in 0..m {
                        let dist = d[i * m + j];
                        if dist <= 0.0 {
                            continue;
                        }
                        let gd = g.data()[i * m + j] / dist;
                        for c in 0..3 {
                            let diff = pa[i * 3 + c] - pb[j * 3 + c];
                            da[i * 3 + c] += gd * diff;
                            db[j * 3 + c] -= gd * diff;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(&[n, 3], da));
                self.acc(grads, *b, Tensor::new(&[m, 3], db));
            }
        }
    }
}

fn inputs_of(op: &Op) -> Vec<ValueId> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b)
        | Op::PairDist(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Transpose(a)
        | Op::SliceCols(a, _, _)
        | Op::GatherRows(a, _)
        | Op::OverwriteRows(a, _)
        | Op::Relu(a)
        | Op::Gelu(a)
        | Op::Ln(a)
        | Op::SoftmaxLast(a)
        | Op::LseLast(a)
        | Op::ReduceSum(a)
        | Op::ReduceMean(a)
        | Op::MinLast(a, _) => vec![*a],
        Op::ConcatLast(parts) => parts.clone(),
        Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
    }
}

fn gelu(x: f64) -> f64 {
    // tanh form of GELU
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Worst relative error between analytic gradients and central finite
/// differences of a scalar-valued tape program.
///
/// `build` must construct the same computation each call from the given
/// leaves; every coordinate of every parameter is perturbed by ±`step`.
pub fn finite_difference_check<F>(
    build: &F,
    params: &[Tensor],
    step: f64,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId, AutodiffError>,
{
    if step <= 0.0 {
        return Err(AutodiffError::InvalidInput("step must be positive".into()));
    }
    let eval = |ps: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = ps.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id);
        for ci in 0..params[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_shape_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 4], vec![0.7; 4]));
        let y = tape.softmax_last(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]));
        let g = tape.leaf(Tensor::new(&[3], vec![1.0; 3]));
        let b = tape.leaf(Tensor::new(&[3], vec![0.0; 3]));
        let y = tape.layer_norm(x, g, b).unwrap();
        // independent scalar computation of the same normalization
        let mean = 2.0;
        let var = 2.0 / 3.0;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let expect = [(1.0 - mean) * inv, 0.0, (3.0 - mean) * inv];
        for (a, e) in tape.value(y).data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{} vs {}", a, e);
        }
        let m: f64 = tape.value(y).data().iter().sum();
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[5], vec![1.0, -2.0, 0.5, 3.0, 9.0]));
        let s = tape.reduce_sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 5]);
    }

    #[test]
    fn backward_of_square_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        let s = tape.mul(x, x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(!grads.is_reached(y));
        assert_eq!(grads.wrt(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_fd_check_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Tensor::uniform(&[6], 1.0, &mut rng);
        let err = finite_difference_check(
            &|tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                tape.reduce_sum(sq)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "fd error {}", err);
    }

    #[test]
    fn softmax_cross_entropy_fd_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let mut onehot = Tensor::zeros(&[3, 5]);
        for (i, &j) in [1usize, 4, 2].iter().enumerate() {
            onehot.data_mut()[i * 5 + j] = 1.0;
        }
        let err = finite_difference_check(
            &|tape, ids| {
                let target = tape.constant(onehot.clone());
                let probs = tape.softmax_last(ids[0])?;
                let logp = tape.ln(probs)?;
                let picked = tape.mul(logp, target)?;
                let total = tape.reduce_sum(picked)?;
                tape.scale(total, -1.0 / 3.0)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "fd error {}", err);
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = Tensor::uniform(&[4], 1.0, &mut rng);
            let (a, b) = (1.7, -0.4);
            let grad_f = {
                let mut t = Tape::new();
                let id = t.leaf(x.clone());
                let sq = t.mul(id, id).unwrap();
                let l = t.reduce_sum(sq).unwrap();
                t.backward(l).unwrap().wrt(id)
            };
            let grad_g = {
                let mut t = Tape::new();
                let id = t.leaf(x.clone());
                let l = t.reduce_mean(id).unwrap();
                t.backward(l).unwrap().wrt(id)
            };
            let grad_combined = {
                let mut t = Tape::new();
                let id = t.leaf(x.clone());
                let sq = t.mul(id, id).unwrap();
                let f = t.reduce_sum(sq).unwrap();
                let gm = t.reduce_mean(id).unwrap();
                let fa = t.scale(f, a).unwrap();
                let gb = t.scale(gm, b).unwrap();
                let l = t.add(fa, gb).unwrap();
                t.backward(l).unwrap().wrt(id)
            };
            for i in 0..4 {
                let want = a * grad_f.data()[i] + b * grad_g.data()[i];
                assert!((grad_combined.data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_forward_and_grads() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = Tensor::uniform(&[3, 3], 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 3], 1.0, &mut rng);
            let mut t = Tape::new();
            let xi = t.leaf(x);
            let wi = t.leaf(w);
            let y = t.matmul(xi, wi).unwrap();
            let act = t.gelu(y).unwrap();
            let l = t.reduce_mean(act).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).item(), g.wrt(wi).data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
