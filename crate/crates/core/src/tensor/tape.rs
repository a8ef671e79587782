use std::sync::Arc;

use super::{dft, matmul_into, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ScaleByCol {
        x: Var,
        weights: Var,
        col: usize,
    },
    LowPass {
        x: Var,
        grid: usize,
        mask: Arc<Vec<bool>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record for one forward pass.
///
/// Node order is a valid topological order; backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{op} expects a 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Standard normal CDF.
pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
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

    /// Drops the graph. Parameter values live in the store and are untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a parameter leaf. Gradient flows back only if the parameter
    /// has `requires_grad` set at the time of recording.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let needs = store.requires_grad(id);
        self.push(store.value(id).clone(), Op::Param(id), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.matmul(tb)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Adds a length-`n` bias to every row of an `m×n` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = check_2d("add_bias", tx)?;
        if tb.len() != n {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        let needs = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|v| v * c).collect()).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        check_2d("transpose", self.value(x))?;
        let out = self.value(x).transpose();
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), needs))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = check_2d("softmax_rows", tx)?;
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax_rows".into()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), needs))
    }

    /// Per-row normalization with affine `gamma`, `beta` (length `d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, d) = check_2d("layer_norm", tx)?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(&[m, d], out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Exact GELU: `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|&v| v * norm_cdf(v)).collect()).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(out, Op::Gelu(x), needs)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (p, c) = check_2d("cross_entropy", tl)?;
        if labels.len() != p {
            return Err(Error::dim("cross_entropy", tl.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                limit: c,
            });
        }
        if tl.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logits".into()));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[y];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = Tensor::scalar(loss / p as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = check_2d("slice_cols", tx)?;
        if start + len > n {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                limit: n,
            });
        }
        let data = tx.data().chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let out = Tensor::new(&[m, len], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = check_2d("concat_cols", self.value(p))?;
            if r != m {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        let needs = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// `out[i, j] = x[i, j] · weights[i, col]`.
    pub fn scale_by_col(&mut self, x: Var, weights: Var, col: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weights));
        let (m, n) = check_2d("scale_by_col", tx)?;
        let (wm, wk) = check_2d("scale_by_col", tw)?;
        if wm != m || col >= wk {
            return Err(Error::dim("scale_by_col", tx.shape(), tw.shape()));
        }
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let w = tw.data()[i * wk + col];
            row.iter_mut().for_each(|v| *v *= w);
        }
        let out = Tensor::new(&[m, n], data)?;
        let needs = self.needs(&[x, weights]);
        Ok(self.push(out, Op::ScaleByCol { x, weights, col }, needs))
    }

    /// Low-frequency component of token features laid out on a `grid×grid`
    /// patch grid, one channel per column. The projection is self-adjoint.
    pub fn lowpass(&mut self, x: Var, grid: usize, mask: Arc<Vec<bool>>) -> Result<Var> {
        let out = dft::lowpass_tokens(self.value(x), grid, &mask)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::LowPass { x, grid, mask }, needs))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into the
    /// store for parameters with `requires_grad`; nothing else is written.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) -> Result<()> {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                None => grads[v.0] = Some(delta),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let delta = Tensor::new(node.value.shape(), g.to_vec())?;
                store.accumulate_grad(*id, &delta);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let at = ta.transpose();
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut db, k, m, n);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                acc(*x, g.to_vec());
                acc(*bias, db);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Transpose(x) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let t = Tensor::new(&[m, n], g.to_vec())?.transpose();
                acc(*x, t.into_data());
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xhat.len()];
                for (i, gr) in g.chunks(d).enumerate() {
                    let hr = &xhat[i * d..(i + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let scale = inv_std[i] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[i * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let dx = tx
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| gv * (norm_cdf(v) + v * norm_pdf(v)))
                    .collect();
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let p = labels.len() as f64;
                let mut dx = probs.clone();
                for (row, &y) in dx.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g[0] / p);
                }
                acc(*logits, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = node.value.cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, gr) in g.chunks(w).enumerate() {
                    dx[i * n + start..i * n + start + w].copy_from_slice(gr);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let dp = g.chunks(n).flat_map(|r| r[offset..offset + w].iter().copied()).collect();
                    acc(p, dp);
                    offset += w;
                }
            }
            Op::ScaleByCol { x, weights, col } => {
                let (tx, tw) = (self.value(*x), self.value(*weights));
                let n = tx.cols();
                let k = tw.cols();
                let mut dx = g.to_vec();
                let mut dw = vec![0.0; tw.len()];
                for i in 0..tx.rows() {
                    let w = tw.data()[i * k + col];
                    let gr = &g[i * n..(i + 1) * n];
                    let xr = &tx.data()[i * n..(i + 1) * n];
                    dx[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= w);
                    dw[i * k + col] = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                }
                acc(*x, dx);
                acc(*weights, dw);
            }
            Op::LowPass { x, grid, mask } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                acc(*x, dft::lowpass_tokens(&gt, *grid, mask)?.into_data());
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
