use super::gemm::{gemm, Mat};
use super::{
    broadcast_index, broadcast_shapes, concat_heads_plan, expand, head_dim,
    reduce_to, Tensor,
};
use crate::error::{Error, Result};

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { x: Var, c: Tensor },
    AddConst { x: Var },
    Scale { x: Var, s: f64 },
    Relu { x: Var },
    Softmax { x: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Concat { a: Var, b: Var },
    Sum { x: Var },
    WeightedSqErr {
        pred: Var,
        target: Tensor,
        weight: Tensor,
        scale: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records executed ops so that [`Tape::backward`] can replay them in reverse.
///
/// A tape is single-writer; build one per forward pass.
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if the leaf is detached or
    /// unreachable from every loss seen so far.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` over the last two axes: `[.., m, k] x [.., n, k] -> [.., m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let plan = MatMulPlan::new(av.shape(), bv.shape(), trans_b)?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.forward(av.data(), bv.data(), &mut out);
        let value = Tensor::new(plan.out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(av.shape().to_vec(), data);
        }
        let shape = broadcast_shapes(av.shape(), bv.shape())?;
        let ia = broadcast_index(av.shape(), &shape);
        let ib = broadcast_index(bv.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
            .collect();
        Tensor::new(shape, data)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// `x * c` for a constant `c` broadcast to the shape of `x`.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let c = broadcast_const(c, xv.shape())?;
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst { x, c }, rg))
    }

    /// `x + c` for a constant `c` broadcast to the shape of `x`.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let c = broadcast_const(c, xv.shape())?;
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AddConst { x }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Softmax over the last axis of `x + mask`. The additive mask, when
    /// given, is a constant broadcast to the shape of `x` whose entries are
    /// `0` or [`crate::attention::MASKED`].
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in softmax input".into()));
        }
        let (&n, _) = xv
            .shape()
            .split_last()
            .ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let mut data = xv.data().to_vec();
        if let Some(m) = mask {
            let m = broadcast_const(m, xv.shape())?;
            for (d, mv) in data.iter_mut().zip(m.data()) {
                *d += mv;
            }
        }
        if n > 0 {
            for row in data.chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                let inv = 1.0 / total;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Layer normalization over the last axis followed by `gamma * . + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.shape() != [n] || b.shape() != [n] {
            return Err(Error::shape(format!(
                "layer_norm affine params {:?}/{:?} do not match width {n}",
                g.shape(),
                b.shape()
            )));
        }
        let rows = if n == 0 { 0 } else { xv.len() / n };
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n.max(1)).take(rows) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// `[.., D] -> [n_heads, .., D / n_heads]`.
    pub fn split_heads(&mut self, x: Var, n_heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (&d, lead) = shape
            .split_last()
            .ok_or_else(|| Error::shape("split_heads of a scalar"))?;
        let dh = head_dim(d, n_heads)?;
        let mut s = lead.to_vec();
        s.extend([n_heads, dh]);
        let r = s.len();
        let mut perm = vec![r - 2];
        perm.extend(0..r - 2);
        perm.push(r - 1);
        let y = self.reshape(x, &s)?;
        self.permute(y, &perm)
    }

    /// `[n_heads, .., dh] -> [.., n_heads * dh]`.
    pub fn concat_heads(&mut self, x: Var) -> Result<Var> {
        let (perm, shape) = concat_heads_plan(self.shape(x))?;
        let y = self.permute(x, &perm)?;
        self.reshape(y, &shape)
    }

    /// Concatenation along the last axis; leading axes must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ra, rb) = (av.rank(), bv.rank());
        if ra == 0 || ra != rb || av.shape()[..ra - 1] != bv.shape()[..rb - 1] {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (na, nb) = (av.shape()[ra - 1], bv.shape()[rb - 1]);
        let rows = if na + nb == 0 { 0 } else { (av.len() + bv.len()) / (na + nb) };
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * na..(r + 1) * na]);
            data.extend_from_slice(&bv.data()[r * nb..(r + 1) * nb]);
        }
        let mut shape = av.shape().to_vec();
        shape[ra - 1] = na + nb;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(compensated_sum(self.value(x).data().iter().copied()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `scale * sum(weight * (pred - target)^2)` as a scalar.
    pub fn weighted_sq_error(
        &mut self,
        pred: Var,
        target: &Tensor,
        weight: &Tensor,
        scale: f64,
    ) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.shape() != weight.shape() {
            return Err(Error::shape(format!(
                "prediction {:?}, target {:?} and weight {:?} differ",
                pv.shape(),
                target.shape(),
                weight.shape()
            )));
        }
        let total = compensated_sum(
            pv.data()
                .iter()
                .zip(target.data())
                .zip(weight.data())
                .filter(|(_, w)| **w != 0.0)
                .map(|((p, t), w)| w * (p - t) * (p - t)),
        );
        let value = Tensor::scalar(scale * total);
        let rg = self.rg(&[pred]);
        Ok(self.push(
            value,
            Op::WeightedSqErr {
                pred,
                target: target.clone(),
                weight: weight.clone(),
                scale,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, gv) in self.local_grads(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, x) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a += x;
                        }
                    }
                    slot => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let plan = MatMulPlan::new(av.shape(), bv.shape(), *trans_b)?;
                let mut res = vec![];
                if rg(*a) {
                    let mut ga = vec![0.0; av.len()];
                    plan.grad_a(g.data(), bv.data(), &mut ga);
                    res.push((*a, Tensor::new(av.shape().to_vec(), ga)?));
                }
                if rg(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    plan.grad_b(g.data(), av.data(), &mut gb);
                    res.push((*b, Tensor::new(bv.shape().to_vec(), gb)?));
                }
                res
            }
            Op::Add { a, b } => {
                let mut res = vec![];
                if rg(*a) {
                    res.push((*a, reduce_to(g, self.shape(*a))));
                }
                if rg(*b) {
                    res.push((*b, reduce_to(g, self.shape(*b))));
                }
                res
            }
            Op::Sub { a, b } => {
                let mut res = vec![];
                if rg(*a) {
                    res.push((*a, reduce_to(g, self.shape(*a))));
                }
                if rg(*b) {
                    res.push((*b, reduce_to(&g.map(|v| -v), self.shape(*b))));
                }
                res
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut res = vec![];
                if rg(*a) {
                    let be = expand(bv, g.shape());
                    let prod = elementwise(g, &be, |x, y| x * y);
                    res.push((*a, reduce_to(&prod, av.shape())));
                }
                if rg(*b) {
                    let ae = expand(av, g.shape());
                    let prod = elementwise(g, &ae, |x, y| x * y);
                    res.push((*b, reduce_to(&prod, bv.shape())));
                }
                res
            }
            Op::MulConst { x, c } => vec![(*x, elementwise(g, c, |a, b| a * b))],
            Op::AddConst { x } => vec![(*x, g.clone())],
            Op::Scale { x, s } => vec![(*x, g.map(|v| v * s))],
            Op::Relu { x } => {
                let xv = self.value(*x);
                vec![(*x, elementwise(g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }))]
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n.max(1)).zip(g.data().chunks(n.max(1))) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = *node.value.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = Vec::with_capacity(xhat.len());
                let mut dxhat = vec![0.0; n];
                for (r, (gr, hr)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * hr[j];
                    }
                    let nf = n as f64;
                    let k = inv_std[r] / nf;
                    dx.extend((0..n).map(|j| k * (nf * dxhat[j] - s1 - hr[j] * s2)));
                }
                let mut res = vec![];
                if rg(*x) {
                    res.push((*x, Tensor::new(node.value.shape().to_vec(), dx)?));
                }
                if rg(*gamma) {
                    res.push((*gamma, Tensor::new(vec![n], dgamma)?));
                }
                if rg(*beta) {
                    res.push((*beta, Tensor::new(vec![n], dbeta)?));
                }
                res
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv)?)]
            }
            Op::Reshape { x } => vec![(*x, g.clone().reshape(self.shape(*x))?)],
            Op::Concat { a, b } => {
                let na = *self.shape(*a).last().unwrap();
                let nb = *self.shape(*b).last().unwrap();
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.data().chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                vec![
                    (*a, Tensor::new(self.shape(*a).to_vec(), ga)?),
                    (*b, Tensor::new(self.shape(*b).to_vec(), gb)?),
                ]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(self.shape(*x), g.item()))],
            Op::WeightedSqErr {
                pred,
                target,
                weight,
                scale,
            } => {
                let pv = self.value(*pred);
                let k = 2.0 * scale * g.item();
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((p, t), w)| if *w != 0.0 { k * w * (p - t) } else { 0.0 })
                    .collect();
                vec![(*pred, Tensor::new(pv.shape().to_vec(), data)?)]
            }
        };
        Ok(out)
    }
}

/// Neumaier-compensated sum in iteration order.
pub fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

fn broadcast_const(c: &Tensor, to: &[usize]) -> Result<Tensor> {
    let shape = broadcast_shapes(c.shape(), to)?;
    if shape != to {
        return Err(Error::shape(format!(
            "constant {:?} does not broadcast to {to:?}",
            c.shape()
        )));
    }
    Ok(expand(c, to))
}

/// Index bookkeeping for a batched matmul.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    /// Rows of `a` with its batch folded in (used when `b` is rank 2).
    rows: usize,
    out_shape: Vec<usize>,
    /// Per output batch: (a batch offset, b batch offset). Empty when the
    /// batch of `a` is folded into `m` (rank-2 `b`).
    batches: Vec<(usize, usize)>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
            )));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {a:?} x {b:?}{}",
                if trans_b { "^T" } else { "" }
            )));
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shapes(ba, bb)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let batches = if bb.is_empty() {
            vec![]
        } else {
            let ia = broadcast_index(ba, &batch);
            let ib = broadcast_index(bb, &batch);
            ia.into_iter()
                .zip(ib)
                .map(|(i, j)| (i * m * k, j * k * n))
                .collect()
        };
        let rows = ba.iter().product::<usize>() * m;
        Ok(MatMulPlan {
            m,
            k,
            n,
            trans_b,
            rows,
            out_shape,
            batches,
        })
    }

    fn b_mat<'a>(&self, b: &'a [f64]) -> Mat<'a> {
        if self.trans_b {
            Mat::new(b, self.n, self.k).t()
        } else {
            Mat::new(b, self.k, self.n)
        }
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.batches.is_empty() {
            gemm(Mat::new(a, self.rows, k), self.b_mat(b), out, false);
            return;
        }
        for (ob, &(ia, ib)) in self.batches.iter().enumerate() {
            gemm(
                Mat::new(&a[ia..ia + m * k], m, k),
                self.b_mat(&b[ib..ib + k * n]),
                &mut out[ob * m * n..(ob + 1) * m * n],
                false,
            );
        }
    }

    /// dA += dC * B^T (or dC * B when `b` was transposed).
    fn grad_a(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.batches.is_empty() {
            gemm(Mat::new(g, self.rows, n), self.b_mat(b).t(), ga, true);
            return;
        }
        for (ob, &(ia, ib)) in self.batches.iter().enumerate() {
            gemm(
                Mat::new(&g[ob * m * n..(ob + 1) * m * n], m, n),
                self.b_mat(&b[ib..ib + k * n]).t(),
                &mut ga[ia..ia + m * k],
                true,
            );
        }
    }

    /// dB += A^T * dC (or dC^T * A when `b` was transposed).
    fn grad_b(&self, g: &[f64], a: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let one = |g: &[f64], a: &[f64], rows: usize, gb: &mut [f64]| {
            if self.trans_b {
                gemm(Mat::new(g, rows, n).t(), Mat::new(a, rows, k), gb, true);
            } else {
                gemm(Mat::new(a, rows, k).t(), Mat::new(g, rows, n), gb, true);
            }
        };
        if self.batches.is_empty() {
            one(g, a, self.rows, gb);
            return;
        }
        for (ob, &(ia, ib)) in self.batches.iter().enumerate() {
            one(
                &g[ob * m * n..(ob + 1) * m * n],
                &a[ia..ia + m * k],
                m,
                &mut gb[ib..ib + k * n],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let ia = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let z = t.constant(Tensor::zeros(&[3, 2]));
        let za = t.matmul(z, a).unwrap();
        assert!(t.value(za).data().iter().all(|&v| v == 0.0));
        let bad = t.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(t.matmul(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn batched_matmul_broadcasts() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn(&[2, 1, 2, 3], |i| i as f64));
        let b = t.constant(Tensor::from_fn(&[4, 3, 2], |i| (i % 5) as f64));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 4, 2, 2]);
        // spot-check one slice against the naive product
        let av = t.value(a).clone();
        let bv = t.value(b).clone();
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|p| av.at(&[1, 0, i, p]) * bv.at(&[3, p, j])).sum();
                assert_eq!(t.value(c).at(&[1, 3, i, j]), want);
            }
        }
        let nt = t.matmul_nt(a, a).unwrap();
        assert_eq!(t.shape(nt), &[2, 1, 2, 2]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[3]));
        let y = t.softmax(x, None).unwrap();
        for v in t.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = t.constant(Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap());
        let y = t.softmax(x, None).unwrap();
        assert_abs_diff_eq!(t.value(y).data()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(y).data()[1], 1.0 / 3.0, epsilon = 1e-15);
        let x = t.constant(Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
        let mask = Tensor::new(vec![2], vec![0.0, -1e9]).unwrap();
        let y = t.softmax(x, Some(&mask)).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0]);
        let x = t.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(t.softmax(x, None), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones(&[3]));
        let b = t.constant(Tensor::zeros(&[3]));
        let x = t.constant(Tensor::ones(&[3]));
        let y = t.layer_norm(x, g, b).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let g2 = t.constant(Tensor::ones(&[2]));
        let b2 = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let y = t.layer_norm(x, g2, b2).unwrap();
        assert_abs_diff_eq!(t.value(y).data()[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(t.value(y).data()[1], -1.0, epsilon = 1e-5);

        let g0 = t.constant(Tensor::zeros(&[3]));
        let bb = t.constant(Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap());
        let x = t.constant(Tensor::from_fn(&[2, 3], |i| (i * i) as f64));
        let y = t.layer_norm(x, g0, bb).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, -2.0, 7.0, 0.5, -2.0, 7.0]);
    }

    #[test]
    fn relu_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = t.param(Tensor::scalar(3.0));
        let r = t.relu(x);
        let sq = t.mul(r, r).unwrap();
        t.backward(sq).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
        let fd = ((3.0f64 + 1e-6).powi(2) - (3.0f64 - 1e-6).powi(2)) / 2e-6;
        assert!((fd - 6.0).abs() < 1e-6);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
        // second call accumulates
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 12.0);
        t.zero_grad();
        assert!(t.grad(x).is_none());

        let c = t.constant(Tensor::scalar(2.0));
        let z = t.mul(c, x).unwrap();
        t.backward(z).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().item(), 2.0);

        let v = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_of_product_gradient() {
        // d/dA sum(A B) = 1 * B^T: each A[i,p] gets the p-th row sum of B.
        let mut t = Tape::new();
        let a = t.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.param(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }
}
