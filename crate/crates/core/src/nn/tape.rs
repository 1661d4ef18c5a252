//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the tape in reverse, propagating adjoints only through nodes that
//! depend on a `requires_grad` leaf, and accumulates into leaf gradients.

use super::tensor::Tensor;
use super::{SELU_ALPHA, SELU_LAMBDA};
use crate::error::{Error, Result};

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Selu(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    Gap(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    ScaleTimesteps {
        x: Var,
        gate: Var,
    },
    Sum(Var),
    Bce {
        p: Var,
        target: Vec<f64>,
        weight: f64,
    },
    Mse {
        p: Var,
        target: Vec<f64>,
        weight: f64,
    },
    Cosine {
        p: Var,
        target: Vec<f64>,
        weight: f64,
    },
    MeanSquare {
        x: Var,
        coef: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        // a classifier pass records a few hundred nodes
        Self {
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- operations -----------------------------------------------------

    /// Same-padded 1-D convolution. `x` is `T×C_in`, `w` is `K×C_in×C_out`,
    /// `b` is `C_out`; taps sit at offsets `(k − K/2)·dilation`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (t_len, c_in) = self.value(x).dims2("conv1d input")?;
        let (k, wc_in, c_out) = match self.value(w).shape() {
            [k, ci, co] => (*k, *ci, *co),
            s => {
                return Err(Error::shape(
                    "conv1d",
                    format!("weights must be K×C_in×C_out, got {s:?}"),
                ))
            }
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input channels: input has {c_in}, weights expect {wc_in}"),
            ));
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "output channels: weights give {c_out}, bias has shape {:?}",
                    self.value(b).shape()
                ),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("kernel size must be odd for same padding, got {k}"),
            ));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv1d dilation must be at least 1"));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = Vec::with_capacity(t_len * c_out);
        for _ in 0..t_len {
            out.extend_from_slice(self.value(b).data());
        }
        for (kk, rows) in taps(t_len, k, dilation) {
            let (dst, src) = (rows.start, shift(rows.start, kk, k, dilation));
            let n = rows.len();
            gemm(
                n,
                c_in,
                c_out,
                &xv[src * c_in..(src + n) * c_in],
                false,
                &wv[kk * c_in * c_out..(kk + 1) * c_in * c_out],
                false,
                &mut out[dst * c_out..(dst + n) * c_out],
            );
        }
        let value = Tensor::from_parts_unchecked(vec![t_len, c_out], out);
        Ok(self.push(value, Op::Conv1d { x, w, b, dilation }, &[x, w, b]))
    }

    /// `x·W + b` for a vector `x` of length `n`, `W` of shape `n×m`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = match self.value(x).shape() {
            [n] => *n,
            s => {
                return Err(Error::shape(
                    "dense",
                    format!("input must be a vector, got {s:?}"),
                ))
            }
        };
        let (wn, m) = self.value(w).dims2("dense weights")?;
        if wn != n {
            return Err(Error::shape(
                "dense",
                format!("input features: input has {n}, weights expect {wn}"),
            ));
        }
        if self.value(b).shape() != [m] {
            return Err(Error::shape(
                "dense",
                format!(
                    "output features: weights give {m}, bias has shape {:?}",
                    self.value(b).shape()
                ),
            ));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = self.value(b).data().to_vec();
        for (i, &xi) in xv.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(&wv[i * m..(i + 1) * m]) {
                *o += xi * wij;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| selu_scalar(v)).collect();
        let value = Tensor::from_parts_unchecked(xt.shape().to_vec(), data);
        self.push(value, Op::Selu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::from_parts_unchecked(xt.shape().to_vec(), data);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts_unchecked(xt.shape().to_vec(), data);
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 1 {
            return Err(Error::shape(
                "softmax",
                format!("expected a vector, got {:?}", self.value(x).shape()),
            ));
        }
        let value = Tensor::vector(softmax_slice(self.value(x).data()));
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Mean over time: `T×C → C`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (t_len, c) = self.value(x).dims2("gap")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / t_len as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::vector(out), Op::Gap(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts_unchecked(self.value(a).shape().to_vec(), data);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts_unchecked(self.value(a).shape().to_vec(), data);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x + c` for a constant tensor `c`; gradient passes through unchanged.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape(
                "add_const",
                format!("{:?} vs {:?}", self.value(x).shape(), c.shape()),
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let value = Tensor::from_parts_unchecked(c.shape().to_vec(), data);
        Ok(self.push(value, Op::AddConst(x), &[x]))
    }

    /// `y[t,c] = x[t,c]·gate[c]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("scale_channels")?;
        if self.value(gate).shape() != [c] {
            return Err(Error::shape(
                "scale_channels",
                format!(
                    "channels: input has {c}, gate has shape {:?}",
                    self.value(gate).shape()
                ),
            ));
        }
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(g).map(|(a, b)| a * b))
            .collect();
        let value = Tensor::from_parts_unchecked(self.value(x).shape().to_vec(), data);
        Ok(self.push(value, Op::ScaleChannels { x, gate }, &[x, gate]))
    }

    /// `y[t,c] = x[t,c]·gate[t]`; `gate` is `T` or `T×1`.
    pub fn scale_timesteps(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (t_len, c) = self.value(x).dims2("scale_timesteps")?;
        if self.value(gate).len() != t_len {
            return Err(Error::shape(
                "scale_timesteps",
                format!(
                    "timesteps: input has {t_len}, gate has shape {:?}",
                    self.value(gate).shape()
                ),
            ));
        }
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .zip(g)
            .flat_map(|(row, &gt)| row.iter().map(move |a| a * gt))
            .collect();
        let value = Tensor::from_parts_unchecked(self.value(x).shape().to_vec(), data);
        Ok(self.push(value, Op::ScaleTimesteps { x, gate }, &[x, gate]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ---- losses ---------------------------------------------------------

    /// `−w·mean(t·ln p + (1−t)·ln(1−p))` with `p` clamped to `[ε, 1−ε]`.
    pub fn bce(&mut self, p: Var, target: &Tensor, weight: f64) -> Result<Var> {
        self.check_target("bce", p, target)?;
        if target.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("bce targets must lie in [0, 1]"));
        }
        let pv = self.value(p).data();
        let n = pv.len() as f64;
        let s: f64 = pv
            .iter()
            .zip(target.data())
            .map(|(&pi, &ti)| {
                let c = pi.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                ti * c.ln() + (1.0 - ti) * (1.0 - c).ln()
            })
            .sum();
        let value = Tensor::scalar(-weight * s / n);
        let op = Op::Bce {
            p,
            target: target.data().to_vec(),
            weight,
        };
        Ok(self.push(value, op, &[p]))
    }

    /// `w·mean((p − t)²)`.
    pub fn mse(&mut self, p: Var, target: &Tensor, weight: f64) -> Result<Var> {
        self.check_target("mse", p, target)?;
        let pv = self.value(p).data();
        let n = pv.len() as f64;
        let s: f64 = pv
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(weight * s / n);
        let op = Op::Mse {
            p,
            target: target.data().to_vec(),
            weight,
        };
        Ok(self.push(value, op, &[p]))
    }

    /// `w·(1 − cos(p, t))`.
    pub fn cosine(&mut self, p: Var, target: &Tensor, weight: f64) -> Result<Var> {
        self.check_target("cosine", p, target)?;
        let tn = norm(target.data());
        if tn == 0.0 {
            return Err(Error::Degenerate(
                "cosine loss target has zero norm".into(),
            ));
        }
        let pv = self.value(p).data();
        let pn = norm(pv);
        if pn == 0.0 {
            return Err(Error::Degenerate(
                "cosine loss prediction has zero norm".into(),
            ));
        }
        let dot: f64 = pv.iter().zip(target.data()).map(|(a, b)| a * b).sum();
        let value = Tensor::scalar(weight * (1.0 - dot / (pn * tn)));
        let op = Op::Cosine {
            p,
            target: target.data().to_vec(),
            weight,
        };
        Ok(self.push(value, op, &[p]))
    }

    /// `coef·mean(x²)`, the activity penalty.
    pub fn mean_square(&mut self, x: Var, coef: f64) -> Var {
        let xv = self.value(x).data();
        let s: f64 = xv.iter().map(|v| v * v).sum();
        let value = Tensor::scalar(coef * s / xv.len() as f64);
        self.push(value, Op::MeanSquare { x, coef }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn check_target(&self, op: &'static str, p: Var, target: &Tensor) -> Result<()> {
        if self.value(p).len() != target.len() {
            return Err(Error::shape(
                op,
                format!(
                    "prediction has {} elements, target has {}",
                    self.value(p).len(),
                    target.len()
                ),
            ));
        }
        Ok(())
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every `requires_grad` leaf.
    /// Calling it twice without [`zero_grads`](Self::zero_grads) adds the
    /// gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(g) => g.data_mut().iter_mut().zip(&dy).for_each(|(a, b)| *a += b),
                    None => {
                        node.grad = Some(Tensor::from_parts_unchecked(
                            node.value.shape().to_vec(),
                            dy,
                        ))
                    }
                }
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, dilation } => {
                let xt = self.value(*x);
                let (t_len, c_in) = (xt.shape()[0], xt.shape()[1]);
                let ws = self.value(*w).shape();
                let (k, c_out) = (ws[0], ws[2]);
                let wv = self.value(*w).data();
                let need_x = wants(*x);
                let need_w = wants(*w);
                if wants(*b) {
                    let mut db = vec![0.0; c_out];
                    for row in dy.chunks_exact(c_out) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    accumulate(adj, *b, db);
                }
                if !(need_x || need_w) {
                    return;
                }
                let xv = xt.data();
                let block = c_in * c_out;
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
                for (kk, rows) in taps(t_len, k, *dilation) {
                    let (dst, src) = (rows.start, shift(rows.start, kk, k, *dilation));
                    let n = rows.len();
                    let g = &dy[dst * c_out..(dst + n) * c_out];
                    if need_w {
                        let xs = &xv[src * c_in..(src + n) * c_in];
                        gemm(c_in, n, c_out, xs, true, g, false, &mut dw[kk * block..(kk + 1) * block]);
                    }
                    if need_x {
                        let wk = &wv[kk * block..(kk + 1) * block];
                        gemm(n, c_out, c_in, g, false, wk, true, &mut dx[src * c_in..(src + n) * c_in]);
                    }
                }
                if need_x {
                    accumulate(adj, *x, dx);
                }
                if need_w {
                    accumulate(adj, *w, dw);
                }
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let m = dy.len();
                if wants(*b) {
                    accumulate(adj, *b, dy.to_vec());
                }
                if wants(*x) {
                    let dx = (0..xv.len())
                        .map(|i| wv[i * m..(i + 1) * m].iter().zip(dy).map(|(a, g)| a * g).sum())
                        .collect();
                    accumulate(adj, *x, dx);
                }
                if wants(*w) {
                    let mut dw = Vec::with_capacity(wv.len());
                    for &xi in xv {
                        dw.extend(dy.iter().map(|g| xi * g));
                    }
                    accumulate(adj, *w, dw);
                }
            }
            Op::Selu(x) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx = dy
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(g, (&xi, &yi))| {
                        if xi > 0.0 {
                            g * SELU_LAMBDA
                        } else {
                            g * (yi + SELU_LAMBDA * SELU_ALPHA)
                        }
                    })
                    .collect();
                accumulate(adj, *x, dx);
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let dx = dy.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(adj, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(g, &xi)| if xi > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(adj, *x, dx);
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let dot: f64 = dy.iter().zip(s).map(|(g, si)| g * si).sum();
                let dx = dy.iter().zip(s).map(|(g, si)| si * (g - dot)).collect();
                accumulate(adj, *x, dx);
            }
            Op::Gap(x) => {
                let xt = self.value(*x);
                let (t_len, c) = (xt.shape()[0], xt.shape()[1]);
                let inv = 1.0 / t_len as f64;
                let mut dx = Vec::with_capacity(t_len * c);
                for _ in 0..t_len {
                    dx.extend(dy.iter().map(|g| g * inv));
                }
                accumulate(adj, *x, dx);
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, dy.to_vec());
                }
                if wants(*b) {
                    accumulate(adj, *b, dy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if wants(*a) {
                    accumulate(adj, *a, dy.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    accumulate(adj, *b, dy.iter().zip(av).map(|(g, y)| g * y).collect());
                }
            }
            Op::AddConst(x) => accumulate(adj, *x, dy.to_vec()),
            Op::ScaleChannels { x, gate } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                let c = gv.len();
                if wants(*x) {
                    let dx = dy
                        .chunks_exact(c)
                        .flat_map(|row| row.iter().zip(gv).map(|(a, b)| a * b))
                        .collect();
                    accumulate(adj, *x, dx);
                }
                if wants(*gate) {
                    let mut dg = vec![0.0; c];
                    for (grow, xrow) in dy.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for ((d, g), xi) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += g * xi;
                        }
                    }
                    accumulate(adj, *gate, dg);
                }
            }
            Op::ScaleTimesteps { x, gate } => {
                let xt = self.value(*x);
                let c = xt.shape()[1];
                let xv = xt.data();
                let gv = self.value(*gate).data();
                if wants(*x) {
                    let dx = dy
                        .chunks_exact(c)
                        .zip(gv)
                        .flat_map(|(row, &gt)| row.iter().map(move |a| a * gt))
                        .collect();
                    accumulate(adj, *x, dx);
                }
                if wants(*gate) {
                    let dg = dy
                        .chunks_exact(c)
                        .zip(xv.chunks_exact(c))
                        .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(adj, *gate, dg);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(adj, *x, vec![dy[0]; n]);
            }
            Op::Bce { p, target, weight } => {
                let pv = self.value(*p).data();
                let n = pv.len() as f64;
                let scale = -dy[0] * weight / n;
                let dx = pv
                    .iter()
                    .zip(target)
                    .map(|(&pi, &ti)| {
                        if pi <= BCE_EPSILON || pi >= 1.0 - BCE_EPSILON {
                            0.0
                        } else {
                            scale * (ti / pi - (1.0 - ti) / (1.0 - pi))
                        }
                    })
                    .collect();
                accumulate(adj, *p, dx);
            }
            Op::Mse { p, target, weight } => {
                let pv = self.value(*p).data();
                let scale = 2.0 * dy[0] * weight / pv.len() as f64;
                let dx = pv.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                accumulate(adj, *p, dx);
            }
            Op::Cosine { p, target, weight } => {
                let pv = self.value(*p).data();
                let pn = norm(pv);
                let tn = norm(target);
                let dot: f64 = pv.iter().zip(target).map(|(a, b)| a * b).sum();
                let scale = -dy[0] * weight;
                let dx = pv
                    .iter()
                    .zip(target)
                    .map(|(&pi, &ti)| scale * (ti / (pn * tn) - dot * pi / (pn * pn * pn * tn)))
                    .collect();
                accumulate(adj, *p, dx);
            }
            Op::MeanSquare { x, coef } => {
                let xv = self.value(*x).data();
                let scale = 2.0 * dy[0] * coef / xv.len() as f64;
                accumulate(adj, *x, xv.iter().map(|v| scale * v).collect());
            }
        }
    }
}

/// Output rows each tap reaches with an in-range source frame.
fn taps(t_len: usize, k: usize, dilation: usize) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> {
    let half = (k / 2) as isize;
    (0..k).filter_map(move |kk| {
        let off = (kk as isize - half) * dilation as isize;
        let lo = (-off).max(0) as usize;
        let hi = (t_len as isize - off.max(0)).max(0) as usize;
        (lo < hi).then_some((kk, lo..hi))
    })
}

/// Source frame of output row `t` under tap `kk`.
fn shift(t: usize, kk: usize, k: usize, dilation: usize) -> usize {
    (t as isize + (kk as isize - (k / 2) as isize) * dilation as isize) as usize
}

/// `out += op(a)·op(b)` for row-major operands; `op(a)` is `m×k`, `op(b)`
/// is `k×n`, and a flag reads the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, out: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides address exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(g),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn selu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    /// Straight enumeration of the tap offsets `(k − K/2)·d`.
    fn conv_oracle(x: &[f64], kernel: &[f64], d: usize) -> Vec<f64> {
        let half = (kernel.len() / 2) as isize;
        (0..x.len() as isize)
            .map(|t| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let s = t + (k as isize - half) * d as isize;
                        if s >= 0 && (s as usize) < x.len() {
                            w * x[s as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    fn conv_single(x: &[f64], kernel: &[f64], d: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(col(x));
        let w = tape.constant(Tensor::new(vec![kernel.len(), 1, 1], kernel.to_vec()).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d(xv, w, b, d).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn conv_ones_kernel_with_zero_padding() {
        let x = [1.0, 2.0, 3.0];
        let expected = conv_oracle(&x, &[1.0; 3], 1);
        assert_eq!(expected, vec![3.0, 6.0, 5.0]);
        assert_eq!(conv_single(&x, &[1.0; 3], 1), expected);
    }

    #[test]
    fn conv_dilated_taps() {
        let x = [1.0, 0.0, 0.0, 0.0, 1.0];
        let expected = conv_oracle(&x, &[1.0; 3], 2);
        assert_eq!(expected, vec![1.0, 0.0, 2.0, 0.0, 1.0]);
        assert_eq!(conv_single(&x, &[1.0; 3], 2), expected);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.7 - 3.0).collect();
        let x = tape.constant(Tensor::matrix(4, 3, data.clone()).unwrap());
        let mut eye = vec![0.0; 9];
        for c in 0..3 {
            eye[c * 3 + c] = 1.0;
        }
        let w = tape.constant(Tensor::new(vec![1, 3, 3], eye).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 2]));
        let w = tape.constant(Tensor::zeros(&[3, 3, 4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.conv1d(x, w, b, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
    }

    #[test]
    fn selu_reference_points() {
        assert_eq!(selu_scalar(0.0), 0.0);
        assert_eq!(selu_scalar(1.0), 1.0507009873554805);
        assert!((selu_scalar(-20.0) + 1.7580993408473766).abs() < 1e-8);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let s = tape.sigmoid(x);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        let once = tape.grad(x).unwrap().clone();
        tape.backward(l).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.selu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn losses_at_reference_points() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.25, 0.75]));
        let l = tape.mse(p, &Tensor::vector(vec![0.25, 0.75]), 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let p = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = tape.cosine(p, &Tensor::vector(vec![1.0, 0.0]), 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = tape.cosine(p, &Tensor::vector(vec![0.0, 1.0]), 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        let p = tape.constant(Tensor::vector(vec![0.5; 4]));
        let l = tape
            .bce(p, &Tensor::vector(vec![0.0, 1.0, 1.0, 0.0]), 1.0)
            .unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_target() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let err = tape.cosine(p, &Tensor::vector(vec![0.0, 0.0]), 1.0);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn sample_weight_scales_loss() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.2, 0.8]));
        let t = Tensor::vector(vec![0.0, 1.0]);
        let a = tape.cosine(p, &t, 1.0).unwrap();
        let b = tape.cosine(p, &t, 8.65).unwrap();
        assert!((tape.value(b).item() - 8.65 * tape.value(a).item()).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax_slice(&[0.3, -2.0, 1.1]);
        let b = softmax_slice(&[100.3, 98.0, 101.1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
