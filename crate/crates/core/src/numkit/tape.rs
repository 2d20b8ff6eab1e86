//! Tape-based reverse-mode differentiation over [`ParamTensor`] values.
//!
//! Every kernel evaluates eagerly and appends a node holding its output and
//! enough context to replay the adjoint. `backward` walks the nodes in
//! reverse and accumulates gradients into each node's `grad` slot.

use super::tensor::ParamTensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Working precision of kernel outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every kernel output is rounded through `f32` storage.
    F32,
}

/// Contiguous run of rows forming one causal sequence inside a stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf { name: Option<String> },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNormRows { x: Var, gain: Var, eps: f64 },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Select { x: Var, coords: Vec<(usize, usize)> },
    SelectCols { x: Var, cols: Vec<usize> },
    ScaleRows { x: Var, w: Var },
    NormalizeRows(Var),
    MeanRows(Var),
    Sum(Var),
    DotConst { x: Var, weights: Vec<f64> },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        // per (segment, head): len×len row-major attention probabilities
        probs: Vec<Vec<f64>>,
    },
    CrossEntropySum {
        logits: Var,
        targets: Vec<(usize, usize)>,
        // softmax rows of the distinct target rows, keyed by row index
        probs: Vec<(usize, Vec<f64>)>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Silu(_) => "silu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::RmsNormRows { .. } => "rms_norm_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Select { .. } => "select",
            Op::SelectCols { .. } => "select_cols",
            Op::ScaleRows { .. } => "scale_rows",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::DotConst { .. } => "dot_const",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropySum { .. } => "cross_entropy_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: ParamTensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: ParamTensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: ParamTensor) -> Var {
        self.push(value, Op::Leaf { name: None }, true)
    }

    pub fn named_leaf(&mut self, name: &str, value: ParamTensor) -> Var {
        self.push(
            value,
            Op::Leaf {
                name: Some(name.to_string()),
            },
            true,
        )
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: ParamTensor) -> Var {
        self.push(value, Op::Leaf { name: None }, false)
    }

    pub fn value(&self, v: Var) -> &ParamTensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Describes the first node (in evaluation order) holding a non-finite
    /// value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                return None;
            }
            Some(match &n.op {
                Op::Leaf { name: Some(name) } => format!("parameter `{name}` (node {i})"),
                op => format!("{} output (node {i}, shape {:?})", op.name(), n.value.shape()),
            })
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k) = av.dims2();
        let (k2, c) = bv.dims2();
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av.data(), bv.data(), r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(ParamTensor::matrix(r, c, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims2() != bv.dims2() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let (r, c) = av.dims2();
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(ParamTensor::matrix(r, c, out)?, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims2() != bv.dims2() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let (r, c) = av.dims2();
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(ParamTensor::matrix(r, c, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let out = av.data().iter().map(|x| x * factor).collect();
        let rg = self.rg(a);
        let t = ParamTensor::matrix(r, c, out).expect("same shape");
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let out = av.data().iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        let t = ParamTensor::matrix(r, c, out).expect("same shape");
        self.push(t, Op::Silu(a), rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut out = av.data().to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(a);
        let t = ParamTensor::matrix(r, c, out).expect("same shape");
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// `y = gain ⊙ x / sqrt(mean(x²) + eps)` per row; `gain` is `[1×d]`.
    pub fn rms_norm_rows(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (r, d) = xv.dims2();
        if gv.len() != d {
            return Err(Error::shape("rms_norm_rows", xv.shape(), gv.shape()));
        }
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = gv.data()[j] * row[j] * inv;
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(
            ParamTensor::matrix(r, d, out)?,
            Op::RmsNormRows { x, gain, eps },
            rg,
        ))
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Argument(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            ParamTensor::matrix(idx.len(), c, out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Zero matrix with `n_rows` rows where `out[idx[i]] += x[i]`.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if r != idx.len() {
            return Err(Error::shape("scatter_rows", xv.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Argument(format!(
                "scatter_rows index {bad} out of range for {n_rows} rows"
            )));
        }
        let mut out = vec![0.0; n_rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            for j in 0..c {
                out[dst * c + j] += xv.data()[src * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            ParamTensor::matrix(n_rows, c, out)?,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `x[r][c]` for each coordinate into a tensor of shape `out_shape`.
    pub fn select(
        &mut self,
        x: Var,
        coords: &[(usize, usize)],
        out_shape: (usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if out_shape.0 * out_shape.1 != coords.len() {
            return Err(Error::shape(
                "select",
                &[out_shape.0, out_shape.1],
                &[coords.len()],
            ));
        }
        if let Some(bad) = coords.iter().find(|(i, j)| *i >= r || *j >= c) {
            return Err(Error::Argument(format!(
                "select coordinate {bad:?} out of range for {r}x{c}"
            )));
        }
        let out = coords.iter().map(|&(i, j)| xv.data()[i * c + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            ParamTensor::matrix(out_shape.0, out_shape.1, out)?,
            Op::Select {
                x,
                coords: coords.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Argument(format!(
                "select_cols index {bad} out of range for {c} columns"
            )));
        }
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = xv.row(i);
            out.extend(cols.iter().map(|&j| row[j]));
        }
        let rg = self.rg(x);
        Ok(self.push(
            ParamTensor::matrix(r, cols.len(), out)?,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i][j] = x[i][j] * w[i]` with `w` of shape `[n×1]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, c) = xv.dims2();
        if wv.len() != r {
            return Err(Error::shape("scale_rows", xv.shape(), wv.shape()));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let s = wv.data()[i];
            for v in &mut out[i * c..(i + 1) * c] {
                *v *= s;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(ParamTensor::matrix(r, c, out)?, Op::ScaleRows { x, w }, rg))
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::Argument(format!(
                    "normalize_rows: row {i} sums to {s}"
                )));
            }
            for v in row {
                *v /= s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(ParamTensor::matrix(r, c, out)?, Op::NormalizeRows(x), rg))
    }

    /// Column means as a `[1×c]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if r == 0 {
            return Err(Error::Argument("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(ParamTensor::matrix(1, c, out)?, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(ParamTensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ x_i · weights_i` for constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape("dot_const", xv.shape(), &[weights.len()]));
        }
        let s = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(
            ParamTensor::scalar(s),
            Op::DotConst {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention with a strict causal mask,
    /// applied independently within each segment of the stacked rows.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dims2();
        if kv.dims2() != (rows, d) || vv.dims2() != (rows, d) {
            return Err(Error::shape("causal_attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Argument(format!(
                "model width {d} not divisible into {heads} heads"
            )));
        }
        check_segments(segments, rows)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let n = seg.len;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &qv.data()[(seg.start + i) * d + off..][..dh];
                    let row = &mut p[i * n..i * n + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv.data()[(seg.start + j) * d + off..][..dh];
                        *s = scale * dot(qi, kj);
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(seg.start + i) * d + off..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vv.data()[(seg.start + j) * d + off..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            ParamTensor::matrix(rows, d, out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum over `(row, class)` targets of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = lv.dims2();
        if let Some(bad) = targets.iter().find(|(i, j)| *i >= r || *j >= c) {
            return Err(Error::Argument(format!(
                "cross-entropy target {bad:?} out of range for {r}x{c} logits"
            )));
        }
        let mut probs: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut total = 0.0;
        for &(i, class) in targets {
            if !probs.iter().any(|(row, _)| *row == i) {
                let mut p = lv.row(i).to_vec();
                softmax_in_place(&mut p);
                probs.push((i, p));
            }
            // log-sum-exp form avoids log(0) on confident rows
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[class];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            ParamTensor::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires a gradient. Gradients from earlier sweeps are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        self.nodes[loss.0].value.set_grad(vec![1.0])?;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (input, delta) in self.adjoint(i, &g) {
                if self.nodes[input.0].requires_grad {
                    self.nodes[input.0].value.accumulate_grad(&delta);
                }
            }
        }
        Ok(())
    }

    /// Input gradients for node `i` given its output gradient `g`.
    fn adjoint(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, k) = av.dims2();
                let c = bv.cols();
                let mut da = Vec::new();
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    da = vec![0.0; r * k];
                    for ii in 0..r {
                        let gi = &g[ii * c..(ii + 1) * c];
                        for kk in 0..k {
                            da[ii * k + kk] = dot(gi, &bv.data()[kk * c..(kk + 1) * c]);
                        }
                    }
                }
                let mut db = Vec::new();
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    db = vec![0.0; k * c];
                    for ii in 0..r {
                        let gi = &g[ii * c..(ii + 1) * c];
                        for kk in 0..k {
                            let aik = av.data()[ii * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[kk * c..(kk + 1) * c].iter_mut().zip(gi) {
                                *d += aik * gv;
                            }
                        }
                    }
                }
                let mut v = Vec::with_capacity(2);
                if self.rg(*a) {
                    v.push((*a, da));
                }
                if self.rg(*b) {
                    v.push((*b, db));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|x| x * f).collect())],
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                if c > 0 {
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s = dot(yr, gr);
                        for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - s);
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::RmsNormRows { x, gain, eps } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let (r, d) = xv.dims2();
                let mut dx = vec![0.0; r * d];
                let mut dg = vec![0.0; d];
                for ii in 0..r {
                    let row = xv.row(ii);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let gr = &g[ii * d..(ii + 1) * d];
                    let mut ux = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * row[j] * inv;
                        ux += gr[j] * gv.data()[j] * row[j];
                    }
                    let c3 = ux * inv * inv * inv / d as f64;
                    for j in 0..d {
                        dx[ii * d + j] = gr[j] * gv.data()[j] * inv - row[j] * c3;
                    }
                }
                vec![(*x, dx), (*gain, dg)]
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (src, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[dst * c + j] += g[src * c + j];
                    }
                }
                vec![(*x, d)]
            }
            Op::ScatterRows { x, idx } => {
                let c = out.cols();
                let mut d = Vec::with_capacity(idx.len() * c);
                for &dst in idx {
                    d.extend_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                vec![(*x, d)]
            }
            Op::Select { x, coords } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (&(ii, j), gv) in coords.iter().zip(g) {
                    d[ii * c + j] += gv;
                }
                vec![(*x, d)]
            }
            Op::SelectCols { x, cols } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let m = cols.len();
                let mut d = vec![0.0; xv.len()];
                for ii in 0..xv.rows() {
                    for (jj, &j) in cols.iter().enumerate() {
                        d[ii * c + j] += g[ii * m + jj];
                    }
                }
                vec![(*x, d)]
            }
            Op::ScaleRows { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, c) = xv.dims2();
                let mut dx = vec![0.0; r * c];
                let mut dw = vec![0.0; r];
                for ii in 0..r {
                    let s = wv.data()[ii];
                    let gr = &g[ii * c..(ii + 1) * c];
                    dw[ii] = dot(gr, xv.row(ii));
                    for (dv, gv) in dx[ii * c..(ii + 1) * c].iter_mut().zip(gr) {
                        *dv = gv * s;
                    }
                }
                vec![(*x, dx), (*w, dw)]
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for ii in 0..xv.rows() {
                    let s: f64 = xv.row(ii).iter().sum();
                    let yr = &y[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let gy = dot(gr, yr);
                    for j in 0..c {
                        d[ii * c + j] = (gr[j] - gy) / s;
                    }
                }
                vec![(*x, d)]
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2();
                let mut d = vec![0.0; r * c];
                for ii in 0..r {
                    for j in 0..c {
                        d[ii * c + j] = g[j] / r as f64;
                    }
                }
                vec![(*x, d)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::DotConst { x, weights } => {
                vec![(*x, weights.iter().map(|w| w * g[0]).collect())]
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut pi = 0;
                for seg in segments {
                    let n = seg.len;
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let off = h * dh;
                        let at = |row: usize| (seg.start + row) * d + off;
                        for ii in 0..n {
                            let go = &g[at(ii)..at(ii) + dh];
                            // dP_ij = dO_i · v_j, then softmax adjoint
                            let mut dp = vec![0.0; ii + 1];
                            for (j, dpj) in dp.iter_mut().enumerate() {
                                *dpj = dot(go, &vv.data()[at(j)..at(j) + dh]);
                            }
                            let prow = &p[ii * n..ii * n + ii + 1];
                            let s = dot(prow, &dp);
                            for j in 0..=ii {
                                let pij = prow[j];
                                for (t, gv) in go.iter().enumerate() {
                                    dv[at(j) + t] += pij * gv;
                                }
                                let ds = pij * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    dq[at(ii) + t] += ds * kv.data()[at(j) + t];
                                    dk[at(j) + t] += ds * qv.data()[at(ii) + t];
                                }
                            }
                        }
                    }
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::CrossEntropySum {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let mut d = vec![0.0; lv.len()];
                for &(ii, class) in targets {
                    let (_, p) = probs
                        .iter()
                        .find(|(row, _)| *row == ii)
                        .expect("probabilities cached for every target row");
                    for j in 0..c {
                        d[ii * c + j] += g[0] * p[j];
                    }
                    d[ii * c + class] -= g[0];
                }
                vec![(*logits, d)]
            }
        }
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.len == 0 {
            return Err(Error::Argument(format!(
                "segments must tile the rows contiguously, got {segments:?}"
            )));
        }
        next += s.len;
    }
    if next != rows {
        return Err(Error::Argument(format!(
            "segments cover {next} rows, tensor has {rows}"
        )));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * c..(kk + 1) * c]) {
                *o += aik * bv;
            }
        }
    }
    out
}
