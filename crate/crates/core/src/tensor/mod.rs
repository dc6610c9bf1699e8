//! Dense row-major `f64` tensors and a reverse-mode tape over them.
//!
//! [`Tensor`] is a plain value. Differentiation happens on a [`Tape`]: leaves
//! are registered with [`Tape::param`] / [`Tape::constant`], every op appends a
//! node, and [`Tape::backward`] walks the nodes in reverse.

mod gemm;
mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use tape::{compensated_sum, Tape, Var, LAYER_NORM_EPS};

use crate::error::{Error, Result};

/// Dense tensor, row-major, 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.rank())?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = gather_strided(&self.data, &out_shape, &src_strides);
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        self.permute(&[1, 0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Splits the last axis into `n_heads` contiguous blocks:
    /// `[.., D] -> [n_heads, .., D / n_heads]`.
    pub fn split_heads(&self, n_heads: usize) -> Result<Self> {
        let (lead, d) = split_last(&self.shape)?;
        let dh = head_dim(d, n_heads)?;
        let mut shape = lead.to_vec();
        shape.push(n_heads);
        shape.push(dh);
        let r = shape.len();
        let mut perm = vec![r - 2];
        perm.extend(0..r - 2);
        perm.push(r - 1);
        self.clone().reshape(&shape)?.permute(&perm)
    }

    /// Inverse of [`Tensor::split_heads`]: `[n_heads, .., dh] -> [.., n_heads * dh]`.
    pub fn concat_heads(&self) -> Result<Self> {
        let (perm, shape) = concat_heads_plan(&self.shape)?;
        self.permute(&perm)?.reshape(&shape)
    }
}

pub(crate) fn head_dim(d: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::shape(format!(
            "width {d} is not divisible by {n_heads} heads"
        )));
    }
    Ok(d / n_heads)
}

fn split_last(shape: &[usize]) -> Result<(&[usize], usize)> {
    match shape.split_last() {
        Some((&d, lead)) => Ok((lead, d)),
        None => Err(Error::shape("scalar has no last axis")),
    }
}

/// Permutation and final shape that turn `[h, .., dh]` into `[.., h * dh]`.
pub(crate) fn concat_heads_plan(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let r = shape.len();
    if r < 2 {
        return Err(Error::shape(format!(
            "concat_heads needs rank >= 2, got {shape:?}"
        )));
    }
    let mut perm: Vec<usize> = (1..r - 1).collect();
    perm.push(0);
    perm.push(r - 1);
    let mut out: Vec<usize> = shape[1..r - 1].to_vec();
    out.push(shape[0] * shape[r - 1]);
    Ok((perm, out))
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::shape(format!(
            "permutation {perm:?} does not match rank {rank}"
        )));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::shape(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Copies `src` into a dense buffer of `out_shape`, reading element
/// `idx` from `sum(idx[a] * src_strides[a])`.
pub(crate) fn gather_strided(src: &[f64], out_shape: &[usize], src_strides: &[usize]) -> Vec<f64> {
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let r = out_shape.len();
    if r == 0 {
        out.push(src[0]);
        return out;
    }
    let inner = out_shape[r - 1];
    let inner_stride = src_strides[r - 1];
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        // odometer over the leading axes
        let mut axis = r - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of shape `from` as if it had the broadcast
/// shape `to` (stride 0 on expanded axes).
pub(crate) fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let base = strides(from);
    let off = to.len() - from.len();
    (0..to.len())
        .map(|i| {
            if i < off || from[i - off] == 1 {
                0
            } else {
                base[i - off]
            }
        })
        .collect()
}

/// Flat source index for every element of the broadcast shape `to`.
pub(crate) fn broadcast_index(from: &[usize], to: &[usize]) -> Vec<usize> {
    let n: usize = to.iter().product();
    let st = broadcast_strides(from, to);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let r = to.len();
    if r == 0 {
        out.push(0);
        return out;
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        let mut axis = r;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            off += st[axis];
            if idx[axis] < to[axis] {
                break;
            }
            off -= st[axis] * to[axis];
            idx[axis] = 0;
        }
    }
    out
}

/// Expands `t` to the broadcast shape `to`.
pub(crate) fn expand(t: &Tensor, to: &[usize]) -> Tensor {
    if t.shape == to {
        return t.clone();
    }
    let st = broadcast_strides(&t.shape, to);
    Tensor {
        shape: to.to_vec(),
        data: gather_strided(&t.data, to, &st),
    }
}

/// Sums `g` (of broadcast shape) back down to `shape`.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let map = broadcast_index(shape, &g.shape);
    for (v, &j) in g.data.iter().zip(&map) {
        out[j] += v;
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}
