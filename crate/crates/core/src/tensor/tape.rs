use std::collections::BTreeMap;

use super::kernels::{self, axis_layout, gemm};
use super::{Params, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Powf(Var, f64),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gather { x: Var, idx: Vec<usize> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddBias(a, b) | Maximum(a, b)
            | Minimum(a, b) => vec![*a, *b],
            Scale(x, _) | Shift(x) | Gelu(x) | Sigmoid(x) | Log(x) | Powf(x, _) | Abs(x)
            | Transpose(x) | Reshape(x) | Sum(x) | Mean(x) => vec![*x],
            Softmax { x, .. } | Slice { x, .. } | Gather { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Shapes of every recorded value, in recording order.
    pub fn shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn param_leaf(&mut self, name: &str, t: Tensor, trainable: bool) -> Var {
        let v = if trainable { self.leaf(t) } else { self.constant(t) };
        self.params.push((name.to_string(), v));
        v
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor {
            shape: va.shape().to_vec(),
            data,
        }
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|x| f(*x)).collect(),
        }
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let ad = self.value(a).dims2()?;
        let bd = self.value(b).dims2()?;
        let (m, k) = if ta { (ad.1, ad.0) } else { ad };
        let (k2, n) = if tb { (bd.1, bd.0) } else { bd };
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), ad, ta, self.value(b).data(), bd, tb, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let t = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(t, Op::Div(a, b)))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let t = self.zip_map(a, b, |x, y| if x >= y { x } else { y });
        Ok(self.push(t, Op::Maximum(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let t = self.zip_map(a, b, |x, y| if x <= y { x } else { y });
        Ok(self.push(t, Op::Minimum(a, b)))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for {m}x{n} input", self.shape(bias)),
            ));
        }
        let xb = self.value(x).data();
        let bb = self.value(bias).data();
        let mut out = xb.to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(bb) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.map(x, |v| v * k);
        self.push(t, Op::Scale(x, k))
    }

    /// `x + c` elementwise.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::Shift(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let res = kernels::layer_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let t = Tensor::new(self.shape(x).to_vec(), res.out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: res.xhat,
                rstd: res.rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::ln);
        self.push(t, Op::Log(x))
    }

    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        let t = self.map(x, |v| v.powf(e));
        self.push(t, Op::Powf(x, e))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::abs);
        self.push(t, Op::Abs(x))
    }

    /// Concatenate 2-D values along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(shape_err("concat", "need at least one part and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| self.value(*p).dims2())
            .collect::<Result<_>>()?;
        let (rows, cols) = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(shape_err("concat", format!("column mismatch {dims:?}")));
            }
            (dims.iter().map(|d| d.0).sum(), c)
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(shape_err("concat", format!("row mismatch {dims:?}")));
            }
            (r, dims.iter().map(|d| d.1).sum())
        };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for p in parts {
                out.extend_from_slice(self.value(*p).data());
            }
        } else {
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(self.value(*p).row(r));
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) of a 2-D value starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {r}x{c}", start + len),
            ));
        }
        let src = self.value(x).data();
        let t = if axis == 0 {
            Tensor::matrix(len, c, src[start * c..(start + len) * c].to_vec())?
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + start + len]);
            }
            Tensor::matrix(r, len, out)?
        };
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Elements at flat indices, as a 1-D value.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(bad) = idx.iter().find(|i| **i >= src.len()) {
            return Err(shape_err("gather", format!("index {bad} of {}", src.len())));
        }
        let data = idx.iter().map(|i| src[*i]).collect();
        Ok(self.push(
            Tensor::new(vec![idx.len()], data)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads> {
        let Tape { nodes, params } = self;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            propagate(&nodes, &mut grads, i, &dy);
        }

        let mut leaf_grads = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[i].op) {
                let shape = nodes[i].value.shape().to_vec();
                leaf_grads.insert(Var(i), Tensor { shape, data: g });
            }
        }
        Ok(Grads {
            leaves: leaf_grads,
            params,
        })
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, dy: &[f64]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let ad = nodes[a.0].value.dims2().expect("matmul operand");
            let bd = nodes[b.0].value.dims2().expect("matmul operand");
            let (m, n) = node.value.dims2().expect("matmul output");
            if let Some(ga) = acc(grads, nodes, *a) {
                if !ta {
                    gemm(dy, (m, n), false, val(*b), bd, !tb, ga, true);
                } else {
                    gemm(val(*b), bd, *tb, dy, (m, n), true, ga, true);
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                if !tb {
                    gemm(val(*a), ad, !ta, dy, (m, n), false, gb, true);
                } else {
                    gemm(dy, (m, n), true, val(*a), ad, *ta, gb, true);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(g) = acc(grads, nodes, v) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = acc(grads, nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(g) = acc(grads, nodes, *a) {
                for k in 0..g.len() {
                    g[k] += dy[k] * vb[k];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for k in 0..g.len() {
                    g[k] += dy[k] * va[k];
                }
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(g) = acc(grads, nodes, *a) {
                for k in 0..g.len() {
                    g[k] += dy[k] / vb[k];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for k in 0..g.len() {
                    g[k] -= dy[k] * va[k] / (vb[k] * vb[k]);
                }
            }
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let is_max = matches!(node.op, Op::Maximum(..));
            let (va, vb) = (val(*a), val(*b));
            let pick_a: Vec<bool> = va
                .iter()
                .zip(vb.iter())
                .map(|(x, y)| if is_max { x >= y } else { x <= y })
                .collect();
            if let Some(g) = acc(grads, nodes, *a) {
                for k in 0..g.len() {
                    if pick_a[k] {
                        g[k] += dy[k];
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for k in 0..g.len() {
                    if !pick_a[k] {
                        g[k] += dy[k];
                    }
                }
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = acc(grads, nodes, *bias) {
                let n = g.len();
                for row in dy.chunks(n) {
                    g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Scale(x, k) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * k);
            }
        }
        Op::Shift(x) | Op::Reshape(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_layout(node.value.shape(), *axis);
            if let Some(g) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * n * inner + c;
                        let dot: f64 = (0..n).map(|j| dy[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let k = base + j * inner;
                            g[k] += y[k] * (dy[k] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *node.value.shape().last().expect("layer_norm rank");
            let gv = val(*gamma);
            if let Some(g) = acc(grads, nodes, *x) {
                let mut dxhat = vec![0.0; c];
                for (r, s) in rstd.iter().enumerate() {
                    let row = r * c..(r + 1) * c;
                    let (dyr, xh) = (&dy[row.clone()], &xhat[row.clone()]);
                    for j in 0..c {
                        dxhat[j] = dyr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        g[r * c + j] += s * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *gamma) {
                for (k, d) in dy.iter().enumerate() {
                    g[k % c] += d * xhat[k];
                }
            }
            if let Some(g) = acc(grads, nodes, *beta) {
                for (k, d) in dy.iter().enumerate() {
                    g[k % c] += d;
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            if let Some(g) = acc(grads, nodes, *x) {
                for k in 0..g.len() {
                    g[k] += dy[k] * kernels::gelu_grad(xv[k]);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                for k in 0..g.len() {
                    g[k] += dy[k] * y[k] * (1.0 - y[k]);
                }
            }
        }
        Op::Log(x) => {
            let xv = val(*x);
            if let Some(g) = acc(grads, nodes, *x) {
                for k in 0..g.len() {
                    g[k] += dy[k] / xv[k];
                }
            }
        }
        Op::Powf(x, e) => {
            let xv = val(*x);
            if let Some(g) = acc(grads, nodes, *x) {
                for k in 0..g.len() {
                    g[k] += dy[k] * e * xv[k].powf(e - 1.0);
                }
            }
        }
        Op::Abs(x) => {
            let xv = val(*x);
            if let Some(g) = acc(grads, nodes, *x) {
                for k in 0..g.len() {
                    if xv[k] != 0.0 {
                        g[k] += dy[k] * xv[k].signum();
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (_, cols) = node.value.dims2().expect("concat output");
            let mut offset = 0;
            for p in parts {
                let (pr, pc) = nodes[p.0].value.dims2().expect("concat part");
                if let Some(g) = acc(grads, nodes, *p) {
                    if *axis == 0 {
                        let src = &dy[offset * cols..(offset + pr) * cols];
                        g.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    } else {
                        for r in 0..pr {
                            let src = &dy[r * cols + offset..r * cols + offset + pc];
                            g[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                }
                offset += if *axis == 0 { pr } else { pc };
            }
        }
        Op::Slice { x, axis, start } => {
            let (_, c) = nodes[x.0].value.dims2().expect("slice input");
            let (or, oc) = node.value.dims2().expect("slice output");
            if let Some(g) = acc(grads, nodes, *x) {
                if *axis == 0 {
                    let dst = &mut g[start * c..(start + or) * c];
                    dst.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                } else {
                    for r in 0..or {
                        let dst = &mut g[r * c + start..r * c + start + oc];
                        dst.iter_mut()
                            .zip(&dy[r * oc..(r + 1) * oc])
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = node.value.dims2().expect("transpose output");
            if let Some(g) = acc(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] += dy[i * c + j];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                let k = dy[0] / g.len() as f64;
                g.iter_mut().for_each(|g| *g += k);
            }
        }
        Op::Gather { x, idx } => {
            if let Some(g) = acc(grads, nodes, *x) {
                for (d, i) in dy.iter().zip(idx) {
                    g[*i] += d;
                }
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    leaves: BTreeMap<Var, Tensor>,
    params: Vec<(String, Var)>,
}

impl Grads {
    /// Gradient of a leaf, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.leaves.get(v))
    }

    /// One gradient per trainable parameter; unreachable ones are zero.
    pub fn for_params(&self, params: &Params) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(name, e)| {
                let g = self
                    .param(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(e.tensor.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let data = vec![1.5, -2.0, 0.25, 4.0];
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![4], data.clone()).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &data[..]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let l = t.sum(c);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(a).is_none());
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice(c, 1, 2, 1).unwrap();
        assert_eq!(t.value(s).data(), t.value(b).data());
        let r = t.concat(&[a, a], 0).unwrap();
        assert_eq!(t.shape(r), &[4, 2]);
    }
}
