//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node holding its value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes once in reverse insertion
//! order, which is a topological order because inputs always precede their
//! consumers.

use rand::Rng as _;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Log-probability written for masked entries of [`Tape::masked_log_softmax`].
pub const MASKED_LOG_PROB: f64 = -1e30;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Pick(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    #[cfg(test)]
    pub(crate) fault: Option<&'static str>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::domain(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("{name} produced a non-finite value")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input tensor; gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Adds the `1 × d` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(b) != (1, d) {
            return Err(shape_err("add_row", (n, d), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        self.push(out, Op::AddRow(x, b), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), "scale")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.shape(a);
        let (m, q) = self.shape(b);
        if n != m {
            return Err(shape_err("concat_cols", (n, p), (m, q)));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let out = Tensor::from_vec(n, p + q, data)?;
        self.push(out, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Row `k` of the output is row `idx[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::domain(format!("gather_rows: row {bad} out of {n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.value(x).row(i));
        }
        let out = Tensor::from_vec(idx.len(), d, data)?;
        self.push(out, Op::GatherRows(x, idx.to_vec()), "gather_rows")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (n, d) = self.shape(x);
        if n * d != rows * cols {
            return Err(shape_err("reshape", (n, d), (rows, cols)));
        }
        let out = self.value(x).reshaped(rows, cols);
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// The single entry `x[r][c]` as a 1×1 tensor.
    pub fn pick(&mut self, x: Var, r: usize, c: usize) -> Result<Var> {
        let (n, d) = self.shape(x);
        if r >= n || c >= d {
            return Err(Error::domain(format!("pick ({r}, {c}) outside {n}x{d}")));
        }
        let out = Tensor::scalar(self.value(x).get(r, c));
        self.push(out, Op::Pick(x, r, c), "pick")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::domain("mean of an empty tensor"));
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(out, Op::Mean(x), "mean")
    }

    /// Column means, as a `1 × d` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if n == 0 {
            return Err(Error::domain("mean_rows of a tensor with no rows"));
        }
        let mut out = Tensor::zeros(1, d);
        for r in 0..n {
            for (o, &v) in out.data_mut().iter_mut().zip(self.value(x).row(r)) {
                *o += v;
            }
        }
        let out = out.map(|v| v / n as f64);
        self.push(out, Op::MeanRows(x), "mean_rows")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), "relu")
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(out, Op::Elu(x), "elu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope), "leaky_relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x), "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), "exp")
    }

    /// Row-wise log-softmax over the entries where `mask` is `true`.
    ///
    /// Masked entries get [`MASKED_LOG_PROB`], i.e. probability exactly 0,
    /// and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.shape(x);
        if mask.len() != n * d {
            return Err(Error::domain(format!(
                "mask has {} entries for a {n}x{d} tensor",
                mask.len()
            )));
        }
        let mut out = Tensor::filled(n, d, MASKED_LOG_PROB);
        for r in 0..n {
            let row = self.value(x).row(r);
            let m = &mask[r * d..(r + 1) * d];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::domain("masked_log_softmax: every entry of a row is masked"));
            }
            let z: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let lse = max + z.ln();
            for c in 0..d {
                if m[c] {
                    out.set(r, c, row[c] - lse);
                }
            }
        }
        self.push(out, Op::MaskedLogSoftmax(x, mask.to_vec()), "masked_log_softmax")
    }

    /// Layer normalisation over each row, followed by `gain ∘ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(shape_err("layer_norm", (n, d), self.shape(gain)));
        }
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = self.value(x).row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..d {
                xhat.set(r, c, (row[c] - mu) * inv);
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for c in 0..d {
                row[c] = row[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout. Identity unless `training` and `rate > 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let (n, d) = self.shape(x);
        let keep = 1.0 - rate;
        let mask_data = (0..n * d)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(n, d, mask_data)?;
        let out = self.value(x).zip_map(&mask, |v, m| v * m);
        self.push(out, Op::Dropout(x, mask), "dropout")
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = gy.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&gy)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, gy.map(|v| -v));
                    acc(&mut grads, *a, gy);
                }
                Op::AddRow(x, b) => {
                    let d = gy.cols();
                    let mut gb = Tensor::zeros(1, d);
                    for r in 0..gy.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, gy);
                }
                Op::Mul(a, b) => {
                    let ga = gy.zip_map(self.value(*b), |g, v| g * v);
                    let gb = gy.zip_map(self.value(*a), |g, v| g * v);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, gy.map(|g| g * k)),
                Op::ConcatCols(a, b) => {
                    let (n, p) = self.shape(*a);
                    let q = self.shape(*b).1;
                    let mut ga = Vec::with_capacity(n * p);
                    let mut gb = Vec::with_capacity(n * q);
                    for r in 0..n {
                        let row = gy.row(r);
                        ga.extend_from_slice(&row[..p]);
                        gb.extend_from_slice(&row[p..]);
                    }
                    acc(&mut grads, *a, Tensor::from_vec(n, p, ga)?);
                    acc(&mut grads, *b, Tensor::from_vec(n, q, gb)?);
                }
                Op::GatherRows(x, idx) => {
                    let (n, d) = self.shape(*x);
                    let mut gx = Tensor::zeros(n, d);
                    for (k, &src) in idx.iter().enumerate() {
                        let row = &mut gx.data_mut()[src * d..(src + 1) * d];
                        for (o, &v) in row.iter_mut().zip(gy.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let (n, d) = self.shape(*x);
                    acc(&mut grads, *x, gy.reshaped(n, d));
                }
                Op::Pick(x, r, c) => {
                    let (n, d) = self.shape(*x);
                    let mut gx = Tensor::zeros(n, d);
                    gx.set(*r, *c, gy.item());
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (n, d) = self.shape(*x);
                    acc(&mut grads, *x, Tensor::filled(n, d, gy.item()));
                }
                Op::Mean(x) => {
                    let (n, d) = self.shape(*x);
                    acc(&mut grads, *x, Tensor::filled(n, d, gy.item() / (n * d) as f64));
                }
                Op::MeanRows(x) => {
                    let (n, d) = self.shape(*x);
                    let mut gx = Tensor::zeros(n, d);
                    for row in gx.data_mut().chunks_mut(d.max(1)) {
                        for (o, &g) in row.iter_mut().zip(gy.data()) {
                            *o = g / n as f64;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let g = gy.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *x, g);
                }
                Op::Elu(x) => {
                    let g = gy.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { g * v.exp() });
                    acc(&mut grads, *x, g);
                }
                Op::LeakyRelu(x, slope) => {
                    let g = gy.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { g * slope });
                    acc(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    #[cfg(test)]
                    if self.fault == Some("tanh") {
                        acc(&mut grads, *x, gy.zip_map(y, |g, t| g * (1.0 - t)));
                        continue;
                    }
                    acc(&mut grads, *x, gy.zip_map(y, |g, t| g * (1.0 - t * t)));
                }
                Op::Sigmoid(x) => acc(&mut grads, *x, gy.zip_map(y, |g, s| g * s * (1.0 - s))),
                Op::Log(x) => {
                    let g = gy.zip_map(self.value(*x), |g, v| g / v);
                    acc(&mut grads, *x, g);
                }
                Op::Exp(x) => acc(&mut grads, *x, gy.zip_map(y, |g, e| g * e)),
                Op::MaskedLogSoftmax(x, mask) => {
                    let (n, d) = y.shape();
                    let mut gx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let m = &mask[r * d..(r + 1) * d];
                        let gsum: f64 = (0..d).filter(|&c| m[c]).map(|c| gy.get(r, c)).sum();
                        for c in (0..d).filter(|&c| m[c]) {
                            gx.set(r, c, gy.get(r, c) - y.get(r, c).exp() * gsum);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (n, d) = xhat.shape();
                    let g = self.value(*gain).data();
                    let mut gx = Tensor::zeros(n, d);
                    let mut ggain = Tensor::zeros(1, d);
                    let mut gbias = Tensor::zeros(1, d);
                    for r in 0..n {
                        let dy = gy.row(r);
                        let xh = xhat.row(r);
                        let dxh: Vec<f64> = (0..d).map(|c| dy[c] * g[c]).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx.set(r, c, inv_std[r] * (dxh[c] - m1 - xh[c] * m2));
                            ggain.data_mut()[c] += dy[c] * xh[c];
                            gbias.data_mut()[c] += dy[c];
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                }
                Op::Dropout(x, mask) => acc(&mut grads, *x, gy.zip_map(mask, |g, m| g * m)),
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}
