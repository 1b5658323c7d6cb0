//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive appends a
//! node holding its output value and enough context to replay its adjoint;
//! [`Tape::backward`] walks the nodes in reverse order. Parameters enter the
//! tape through [`Tape::param`], which copies the current value once per tape
//! and remembers the binding so gradients can be written back afterwards.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::{axis_split, softmax_strided, ParamId, Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    MeanRows(usize),
    SelectRow(usize, usize),
    SumAll(usize),
    AddN(Vec<usize>),
    MaskScale {
        x: usize,
        mask: Vec<f64>,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    perturbation: Option<(ParamId, usize, f64)>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which every read of `param` sees element `index` shifted by `delta`.
    pub fn with_perturbation(param: ParamId, index: usize, delta: f64) -> Self {
        Self {
            perturbation: Some((param, index, delta)),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.bound.get(&p.id()) {
            return v;
        }
        let mut value = p.value.clone();
        if let Some((id, idx, delta)) = self.perturbation {
            if id == p.id() {
                value.data_mut()[idx] += delta;
            }
        }
        let v = self.push(value, Op::Leaf, p.requires_grad());
        self.bound.insert(p.id(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() > 2 || bv.shape().len() != 2 || av.shape().is_empty() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let shape = if av.shape().len() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let (m, k) = av.dims2();
        let (n, k2) = bv.dims2();
        if k != k2 {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = &av.data()[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(ar, &bv.data()[j * k..(j + 1) * k]));
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMulNt(a.0, b.0), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Adds a bias vector `b: [n]` to every row of `x: [m×n]` (or to `x: [n]`).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (_, n) = xv.dims2();
        if bv.shape() != [n] {
            return Err(shape_err("add_row", xv, bv));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % n])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(value, Op::AddRow(x.0, b.0), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x.0, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v + s, Op::AddScalar(x.0))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x.0))
    }

    /// Softmax along `axis`, shifted by the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.shape().len().max(1) {
            return Err(Error::Input(format!(
                "softmax axis {axis} out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![0.0; xv.numel()];
        softmax_strided(xv.data(), &mut out, outer, n, inner);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            value,
            Op::Softmax {
                x: x.0,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = xv.dims2();
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::LogSoftmax(x.0), rg)
    }

    /// Row-wise layer normalization with gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = xv.dims2();
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table: [V×d]` into `[len(ids)×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (vocab, d) = tv.dims2();
        if ids.is_empty() {
            return Err(Error::Input("empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("id {bad} out of range for table of {vocab} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = xv.dims2();
        if xv.shape().len() != 2 || start + len > n || len == 0 {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::SliceCols { x: x.0, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let rows = self.nodes[first.0].value.dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.dims2().0 != rows {
                return Err(shape_err("concat_cols", &self.nodes[first.0].value, v));
            }
            widths.push(v.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), rg))
    }

    /// Mean over rows: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = xv.dims2();
        let mut out = vec![0.0; n];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let value = Tensor::new(vec![n], out).expect("vector");
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::MeanRows(x.0), rg)
    }

    /// Row `index` of `x: [m×n]` as `[n]`.
    pub fn select_row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = xv.dims2();
        if index >= rows {
            return Err(Error::Input(format!("row {index} out of range ({rows} rows)")));
        }
        let value = Tensor::new(vec![n], xv.row(index).to_vec())?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::SelectRow(x.0, index), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::SumAll(x.0), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of same-shaped terms, accumulated left to right.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = terms.first().ok_or_else(|| Error::Input("sum of no terms".into()))?;
        let mut acc = self.nodes[first.0].value.clone();
        for t in &terms[1..] {
            let tv = &self.nodes[t.0].value;
            if tv.shape() != acc.shape() {
                return Err(shape_err("add_n", &acc, tv));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(tv.data()) {
                *a += b;
            }
        }
        let ids: Vec<usize> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(acc, Op::AddN(ids), rg))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::MaskScale { x: x.0, mask }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    /// Mean over rows of `-Σ target · log softmax(logits)`.
    ///
    /// `target` may itself live on the tape (a softmax of other logits), in
    /// which case gradients flow into both sides.
    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (lv, tv) = (&self.nodes[logits.0].value, &self.nodes[target.0].value);
        if lv.shape() != tv.shape() {
            return Err(shape_err("cross_entropy", lv, tv));
        }
        let (rows, _) = tv.dims2();
        for r in 0..rows {
            let sum: f64 = tv.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidTarget { row: r, sum });
            }
        }
        let logp = self.log_softmax(logits);
        let prod = self.mul(target, logp)?;
        let total = self.sum_all(prod);
        Ok(self.scale(total, -1.0 / rows as f64))
    }

    /// Mean of elementwise squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates gradients into every trainable parameter bound on this tape.
    /// Trainable parameters the loss never touched receive zeros.
    pub fn write_grads<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            if !p.requires_grad() {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let g = self.bound.get(&p.id()).and_then(|&v| self.grad(v));
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(&shape));
            if let Some(g) = g {
                for (a, b) in acc.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Gradient for a bound parameter; `None` if unbound or frozen.
    pub fn param_grad(&self, p: &Parameter) -> Option<Tensor> {
        let &v = self.bound.get(&p.id())?;
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let data = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        Tensor::new(p.value.shape().to_vec(), data).ok()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].requires_grad {
                return;
            }
            let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
            f(buf);
        };
        let val = |i: usize| nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[*a].value.dims2();
                let n = nodes[*b].value.dims2().1;
                acc(*a, &mut |ga| {
                    let bd = val(*b);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    let ad = val(*a);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[*a].value.dims2();
                let n = nodes[*b].value.dims2().0;
                // dA = G·B, dB = Gᵀ·A
                acc(*a, &mut |ga| matmul_into(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| {
                    let ad = val(*a);
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, av) in gb[j * k..(j + 1) * k].iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                                *o += gv * av;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * s)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v)),
            Op::Gelu(x) => {
                let xd = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xd[i]);
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                let (outer, n, inner) = (*outer, *n, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + k;
                            let s: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let (rows, n) = node.value.dims2();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for j in 0..n {
                            let i = r * n + j;
                            gx[i] += g[i] - y[i].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, n) = node.value.dims2();
                let gd = val(*gain);
                acc(*x, &mut |gx| {
                    for (r, &rs) in rstd.iter().enumerate().take(rows) {
                        let base = r * n;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[base + j] * gd[j];
                            mean_d += d;
                            mean_dx += d * xhat[base + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let d = g[base + j] * gd[j];
                            gx[base + j] += rs * (d - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % n] += v * xhat[i];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.dims2().1;
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = node.value.dims2();
                let n = nodes[*x].value.dims2().1;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * n + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.dims2().1;
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::MeanRows(x) => {
                let (rows, n) = nodes[*x].value.dims2();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for j in 0..n {
                            gx[r * n + j] += g[j] / rows as f64;
                        }
                    }
                });
            }
            Op::SelectRow(x, index) => {
                let n = node.value.numel();
                acc(*x, &mut |gx| {
                    for j in 0..n {
                        gx[index * n + j] += g[j];
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::AddN(terms) => {
                for &t in terms {
                    acc(t, &mut |gt| gt.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                }
            }
            Op::MaskScale { x, mask } => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
        }
    }
}
