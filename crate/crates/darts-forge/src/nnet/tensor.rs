//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Eager define-by-run tape: every operation computes its value immediately
//! and records enough structure for the backward sweep. Matrices are
//! time-major (`T x D`); convolution inputs are `T x F x C`.

use ndarray::{ArrayD, Axis, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a {want}-d input, got shape {got:?}")]
    BadRank {
        op: &'static str,
        want: usize,
        got: Vec<usize>,
    },
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// 2-D matrix product.
    MatMul(NodeId, NodeId),
    /// `T x D` matrix plus a length-D bias row.
    AddRowBroadcast(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Row-wise log-softmax of a 2-D matrix.
    LogSoftmax(NodeId),
    /// Concatenate 2-D matrices along the column axis.
    ConcatCols(Vec<NodeId>),
    /// Row t of the output is row clamp(t + offset) of the input.
    ShiftRows(NodeId, i64),
    ReverseRows(NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
        len: usize,
    },
    /// Stack 1 x D rows into a T x D matrix.
    StackRows(Vec<NodeId>),
    /// Select one row of a 2-D matrix as a 1 x D matrix.
    Row(NodeId, usize),
    Scale(NodeId, f64),
    SumAll(NodeId),
    /// `T x F x C` -> `T x (F*C)`.
    FlattenChannels(NodeId),
    /// 3x3 convolution over `T x F x C`, stride 1 in time, `stride_f` in
    /// frequency, replicated edge padding.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride_f: usize,
    },
    /// Normalization over all axes but the last, followed by gamma/beta.
    BatchNorm {
        src: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Statistics actually used (batch stats in train mode, running
        /// stats in inference mode).
        mean: Vec<f64>,
        var: Vec<f64>,
        train: bool,
    },
}

struct Node {
    value: ArrayD<f64>,
    grad: ArrayD<f64>,
    op: Op,
}

pub const BN_EPS: f64 = 1e-5;

/// The autodiff tape; rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].grad
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a].value.shape().to_vec(),
                rhs: self.nodes[b].value.shape().to_vec(),
            });
        }
        let v = &self.nodes[a].value + &self.nodes[b].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a].value.shape().to_vec(),
                rhs: self.nodes[b].value.shape().to_vec(),
            });
        }
        let v = &self.nodes[a].value * &self.nodes[b].value;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    fn as_2d(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TapeError> {
        let s = self.nodes[id].value.shape();
        if s.len() != 2 {
            return Err(TapeError::BadRank {
                op,
                want: 2,
                got: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (m, ka) = self.as_2d(a, "matmul")?;
        let (kb, n) = self.as_2d(b, "matmul")?;
        if ka != kb {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let av = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bv = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let v = av.dot(&bv);
        Ok(self.push(v.into_dyn(), Op::MatMul(a, b)))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TapeError> {
        let (_, d) = self.as_2d(x, "add_row_broadcast")?;
        let bs = self.nodes[bias].value.shape().to_vec();
        if bs != [d] {
            return Err(TapeError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: vec![d],
                rhs: bs,
            });
        }
        let mut v = self.nodes[x].value.clone();
        let b = &self.nodes[bias].value;
        for mut row in v.axis_iter_mut(Axis(0)) {
            for (j, e) in row.iter_mut().enumerate() {
                *e += b[j];
            }
        }
        Ok(self.push(v, Op::AddRowBroadcast(x, bias)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.as_2d(a, "log_softmax")?;
        let mut v = self.nodes[a].value.clone();
        for mut row in v.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logz = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - logz);
        }
        Ok(self.push(v, Op::LogSoftmax(a)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        let (t, _) = self.as_2d(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (tp, dp) = self.as_2d(p, "concat_cols")?;
            if tp != t {
                return Err(TapeError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![t],
                    rhs: vec![tp],
                });
            }
            cols += dp;
        }
        let mut v = ndarray::Array2::<f64>::zeros((t, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            let d = pv.shape()[1];
            for r in 0..t {
                for c in 0..d {
                    v[[r, at + c]] = pv[[r, c]];
                }
            }
            at += d;
        }
        Ok(self.push(v.into_dyn(), Op::ConcatCols(parts.to_vec())))
    }

    /// Shifted copy with replicated edges: out[t] = in[clamp(t + offset)].
    pub fn shift_rows(&mut self, a: NodeId, offset: i64) -> Result<NodeId, TapeError> {
        let (t, d) = self.as_2d(a, "shift_rows")?;
        let src = &self.nodes[a].value;
        let mut v = ndarray::Array2::<f64>::zeros((t, d));
        for r in 0..t {
            let s = (r as i64 + offset).clamp(0, t as i64 - 1) as usize;
            for c in 0..d {
                v[[r, c]] = src[[s, c]];
            }
        }
        Ok(self.push(v.into_dyn(), Op::ShiftRows(a, offset)))
    }

    pub fn reverse_rows(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let (t, d) = self.as_2d(a, "reverse_rows")?;
        let src = &self.nodes[a].value;
        let mut v = ndarray::Array2::<f64>::zeros((t, d));
        for r in 0..t {
            for c in 0..d {
                v[[r, c]] = src[[t - 1 - r, c]];
            }
        }
        Ok(self.push(v.into_dyn(), Op::ReverseRows(a)))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        let (t, d) = self.as_2d(src, "slice_cols")?;
        if start + len > d {
            return Err(TapeError::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![start + len],
                rhs: vec![d],
            });
        }
        let sv = &self.nodes[src].value;
        let mut v = ndarray::Array2::<f64>::zeros((t, len));
        for r in 0..t {
            for c in 0..len {
                v[[r, c]] = sv[[r, start + c]];
            }
        }
        Ok(self.push(v.into_dyn(), Op::SliceCols { src, start, len }))
    }

    pub fn row(&mut self, a: NodeId, idx: usize) -> Result<NodeId, TapeError> {
        let (_, d) = self.as_2d(a, "row")?;
        let src = &self.nodes[a].value;
        let mut v = ndarray::Array2::<f64>::zeros((1, d));
        for c in 0..d {
            v[[0, c]] = src[[idx, c]];
        }
        Ok(self.push(v.into_dyn(), Op::Row(a, idx)))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, TapeError> {
        let (_, d) = self.as_2d(rows[0], "stack_rows")?;
        let mut v = ndarray::Array2::<f64>::zeros((rows.len(), d));
        for (r, &id) in rows.iter().enumerate() {
            let rv = &self.nodes[id].value;
            if rv.shape() != [1, d] {
                return Err(TapeError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![1, d],
                    rhs: rv.shape().to_vec(),
                });
            }
            for c in 0..d {
                v[[r, c]] = rv[[0, c]];
            }
        }
        Ok(self.push(v.into_dyn(), Op::StackRows(rows.to_vec())))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::SumAll(a),
        )
    }

    pub fn flatten_channels(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 3 {
            return Err(TapeError::BadRank {
                op: "flatten_channels",
                want: 3,
                got: s,
            });
        }
        let v = self.nodes[a]
            .value
            .clone()
            .into_shape_with_order(IxDyn(&[s[0], s[1] * s[2]]))
            .unwrap();
        Ok(self.push(v, Op::FlattenChannels(a)))
    }

    /// 3x3 convolution over `T x F x Cin` with kernel `3 x 3 x Cin x Cout`;
    /// stride 1 in time, `stride_f` in frequency; replicated edge padding of
    /// one on both axes. Output `T x ceil(F/stride_f) x Cout`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride_f: usize) -> Result<NodeId, TapeError> {
        let ishape = self.nodes[input].value.shape().to_vec();
        let kshape = self.nodes[kernel].value.shape().to_vec();
        if ishape.len() != 3 {
            return Err(TapeError::BadRank {
                op: "conv2d",
                want: 3,
                got: ishape,
            });
        }
        if kshape.len() != 4 || kshape[0] != 3 || kshape[1] != 3 || kshape[2] != ishape[2] {
            return Err(TapeError::ShapeMismatch {
                op: "conv2d",
                lhs: ishape,
                rhs: kshape,
            });
        }
        let (t, f, cin) = (ishape[0], ishape[1], ishape[2]);
        let cout = kshape[3];
        let f_out = f.div_ceil(stride_f);
        let x = &self.nodes[input].value;
        let k = &self.nodes[kernel].value;
        let mut v = ArrayD::<f64>::zeros(IxDyn(&[t, f_out, cout]));
        for ot in 0..t {
            for of in 0..f_out {
                for oc in 0..cout {
                    let mut acc = 0.0;
                    for dt in 0..3usize {
                        let it = (ot as i64 + dt as i64 - 1).clamp(0, t as i64 - 1) as usize;
                        for df in 0..3usize {
                            let fi = ((of * stride_f) as i64 + df as i64 - 1)
                                .clamp(0, f as i64 - 1) as usize;
                            for ic in 0..cin {
                                acc += x[[it, fi, ic]] * k[[dt, df, ic, oc]];
                            }
                        }
                    }
                    v[[ot, of, oc]] = acc;
                }
            }
        }
        Ok(self.push(v, Op::Conv2d { input, kernel, stride_f }))
    }

    /// Channel batch normalization: normalize over all axes but the last,
    /// then scale/shift by gamma/beta. In train mode batch statistics are
    /// used (and returned for the running-average update); in inference mode
    /// the provided running statistics make this a fixed affine map.
    pub fn batch_norm(
        &mut self,
        src: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>), TapeError> {
        let shape = self.nodes[src].value.shape().to_vec();
        let c = *shape.last().ok_or(TapeError::BadRank {
            op: "batch_norm",
            want: 2,
            got: shape.clone(),
        })?;
        let n: usize = shape.iter().take(shape.len() - 1).product();
        let train = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let x = &self.nodes[src].value;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                let flat = x.view().into_shape_with_order((n, c)).unwrap();
                for row in flat.rows() {
                    for j in 0..c {
                        mean[j] += row[j];
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for row in flat.rows() {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= n as f64;
                }
                (mean, var)
            }
        };
        let x = &self.nodes[src].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let mut v = x.clone();
        {
            let mut flat = v.view_mut().into_shape_with_order((n, c)).unwrap();
            for mut row in flat.rows_mut() {
                for j in 0..c {
                    row[j] = (row[j] - mean[j]) / (var[j] + BN_EPS).sqrt() * g[j] + b[j];
                }
            }
        }
        let id = self.push(
            v,
            Op::BatchNorm {
                src,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                train,
            },
        );
        Ok((id, mean, var))
    }

    /// Seed `d(loss)` with 1 and sweep the tape in reverse. Also accepts an
    /// explicit upstream gradient for a non-scalar root.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TapeError> {
        if !self.nodes[loss].value.shape().is_empty() {
            return Err(TapeError::NonScalarLoss(
                self.nodes[loss].value.shape().to_vec(),
            ));
        }
        let seed = ArrayD::from_elem(IxDyn(&[]), 1.0);
        self.backward_with(loss, seed)
    }

    pub fn backward_with(&mut self, root: NodeId, upstream: ArrayD<f64>) -> Result<(), TapeError> {
        if upstream.shape() != self.nodes[root].value.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "backward_with",
                lhs: upstream.shape().to_vec(),
                rhs: self.nodes[root].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.nodes[root].grad = upstream;
        for id in (0..=root).rev() {
            let op = self.nodes[id].op.clone();
            let grad = self.nodes[id].grad.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.nodes[a].grad += &grad;
                    self.nodes[b].grad += &grad;
                }
                Op::Mul(a, b) => {
                    let ga = &grad * &self.nodes[b].value;
                    let gb = &grad * &self.nodes[a].value;
                    self.nodes[a].grad += &ga;
                    self.nodes[b].grad += &gb;
                }
                Op::MatMul(a, b) => {
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let av = self.nodes[a]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let bv = self.nodes[b]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let ga = g2.dot(&bv.t()).into_dyn();
                    let gb = av.t().dot(&g2).into_dyn();
                    self.nodes[a].grad += &ga;
                    self.nodes[b].grad += &gb;
                }
                Op::AddRowBroadcast(x, bias) => {
                    self.nodes[x].grad += &grad;
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let col_sums = g2.sum_axis(Axis(0));
                    let mut bg = self.nodes[bias].grad.view_mut();
                    for (j, s) in col_sums.iter().enumerate() {
                        bg[j] += s;
                    }
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let ga = &grad * &mask;
                    self.nodes[a].grad += &ga;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let ga = &grad * &(y * &y.mapv(|v| 1.0 - v));
                    self.nodes[a].grad += &ga;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let ga = &grad * &y.mapv(|v| 1.0 - v * v);
                    self.nodes[a].grad += &ga;
                }
                Op::LogSoftmax(a) => {
                    // d/dx log_softmax: g - softmax * sum(g) per row.
                    let y = self.nodes[id].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut ga = ndarray::Array2::<f64>::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let gsum: f64 = g2.row(r).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = g2[[r, c]] - y[[r, c]].exp() * gsum;
                        }
                    }
                    self.nodes[a].grad += &ga.into_dyn();
                }
                Op::ConcatCols(parts) => {
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut at = 0;
                    for p in parts {
                        let d = self.nodes[p].value.shape()[1];
                        let mut pg = self.nodes[p]
                            .grad
                            .view_mut()
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        for r in 0..g2.nrows() {
                            for c in 0..d {
                                pg[[r, c]] += g2[[r, at + c]];
                            }
                        }
                        at += d;
                    }
                }
                Op::ShiftRows(a, offset) => {
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let t = g2.nrows();
                    let mut ag = self.nodes[a]
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    for r in 0..t {
                        let s = (r as i64 + offset).clamp(0, t as i64 - 1) as usize;
                        for c in 0..g2.ncols() {
                            ag[[s, c]] += g2[[r, c]];
                        }
                    }
                }
                Op::ReverseRows(a) => {
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let t = g2.nrows();
                    let mut ag = self.nodes[a]
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    for r in 0..t {
                        for c in 0..g2.ncols() {
                            ag[[t - 1 - r, c]] += g2[[r, c]];
                        }
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut sg = self.nodes[src]
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    for r in 0..g2.nrows() {
                        for c in 0..len {
                            sg[[r, start + c]] += g2[[r, c]];
                        }
                    }
                }
                Op::Row(a, idx) => {
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut ag = self.nodes[a]
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    for c in 0..g2.ncols() {
                        ag[[idx, c]] += g2[[0, c]];
                    }
                }
                Op::StackRows(rows) => {
                    let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    for (r, id2) in rows.iter().enumerate() {
                        let mut rg = self.nodes[*id2]
                            .grad
                            .view_mut()
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        for c in 0..g2.ncols() {
                            rg[[0, c]] += g2[[r, c]];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = grad.mapv(|x| x * c);
                    self.nodes[a].grad += &ga;
                }
                Op::FlattenChannels(a) => {
                    let shape = self.nodes[a].value.raw_dim();
                    let ga = grad.clone().into_shape_with_order(shape).unwrap();
                    self.nodes[a].grad += &ga;
                }
                Op::SumAll(a) => {
                    let g = grad[[]];
                    self.nodes[a].grad.mapv_inplace(|x| x); // keep shape
                    let add = ArrayD::from_elem(self.nodes[a].value.raw_dim(), g);
                    self.nodes[a].grad += &add;
                }
                Op::Conv2d { input, kernel, stride_f } => {
                    let x = self.nodes[input].value.clone();
                    let k = self.nodes[kernel].value.clone();
                    let (t, f, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let cout = k.shape()[3];
                    let f_out = f.div_ceil(stride_f);
                    let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
                    let mut gk = ArrayD::<f64>::zeros(k.raw_dim());
                    for ot in 0..t {
                        for of in 0..f_out {
                            for oc in 0..cout {
                                let g = grad[[ot, of, oc]];
                                if g == 0.0 {
                                    continue;
                                }
                                for dt in 0..3usize {
                                    let it =
                                        (ot as i64 + dt as i64 - 1).clamp(0, t as i64 - 1) as usize;
                                    for df in 0..3usize {
                                        let fi = ((of * stride_f) as i64 + df as i64 - 1)
                                            .clamp(0, f as i64 - 1)
                                            as usize;
                                        for ic in 0..cin {
                                            gx[[it, fi, ic]] += g * k[[dt, df, ic, oc]];
                                            gk[[dt, df, ic, oc]] += g * x[[it, fi, ic]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.nodes[input].grad += &gx;
                    self.nodes[kernel].grad += &gk;
                }
                Op::BatchNorm {
                    src,
                    gamma,
                    beta,
                    mean,
                    var,
                    train,
                } => {
                    let shape = self.nodes[src].value.shape().to_vec();
                    let c = *shape.last().unwrap();
                    let n: usize = shape.iter().take(shape.len() - 1).product();
                    let x = self.nodes[src].value.clone();
                    let xf = x.view().into_shape_with_order((n, c)).unwrap();
                    let gf = grad.view().into_shape_with_order((n, c)).unwrap();
                    let g = self.nodes[gamma].value.clone();
                    // gamma/beta gradients.
                    {
                        let mut gg = vec![0.0; c];
                        let mut bg = vec![0.0; c];
                        for r in 0..n {
                            for j in 0..c {
                                let xhat = (xf[[r, j]] - mean[j]) / (var[j] + BN_EPS).sqrt();
                                gg[j] += gf[[r, j]] * xhat;
                                bg[j] += gf[[r, j]];
                            }
                        }
                        let mut gview = self.nodes[gamma].grad.view_mut();
                        for j in 0..c {
                            gview[j] += gg[j];
                        }
                        let mut bview = self.nodes[beta].grad.view_mut();
                        for j in 0..c {
                            bview[j] += bg[j];
                        }
                    }
                    let mut gx = ndarray::Array2::<f64>::zeros((n, c));
                    if train {
                        // Full batch-stats backward.
                        for j in 0..c {
                            let inv_std = 1.0 / (var[j] + BN_EPS).sqrt();
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for r in 0..n {
                                let xhat = (xf[[r, j]] - mean[j]) * inv_std;
                                sum_g += gf[[r, j]];
                                sum_gx += gf[[r, j]] * xhat;
                            }
                            for r in 0..n {
                                let xhat = (xf[[r, j]] - mean[j]) * inv_std;
                                gx[[r, j]] = g[j] * inv_std / n as f64
                                    * (n as f64 * gf[[r, j]] - sum_g - xhat * sum_gx);
                            }
                        }
                    } else {
                        for j in 0..c {
                            let inv_std = 1.0 / (var[j] + BN_EPS).sqrt();
                            for r in 0..n {
                                gx[[r, j]] = gf[[r, j]] * g[j] * inv_std;
                            }
                        }
                    }
                    let gx = gx.into_shape_with_order(IxDyn(&shape)).unwrap();
                    self.nodes[src].grad += &gx;
                }
            }
        }
        Ok(())
    }
}
