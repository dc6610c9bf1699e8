//! Multi-head attention along the temporal and spatial axes, the
//! decoder-to-encoder interaction attention, and the position-wise FFN.
//!
//! Hidden states are `[B, T, N, D]` (a missing batch axis is accepted and
//! restored). Each block ends with dropout, a residual connection and layer
//! normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Additive score for pairs that may not attend to each other.
pub const MASKED: f64 = -1e9;

/// `0` where the symmetrized adjacency is positive or on the diagonal,
/// [`MASKED`] elsewhere.
pub fn spatial_mask(adjacency: &Tensor) -> Result<Tensor> {
    let s = adjacency.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(format!("adjacency must be square, got {s:?}")));
    }
    let n = s[0];
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i == j || adjacency.at(&[i, j]) > 0.0 || adjacency.at(&[j, i]) > 0.0 {
            0.0
        } else {
            MASKED
        }
    }))
}

/// Inverted dropout driven by its own seeded stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param(format!("dropout rate {p} outside [0, 1)")));
        }
        Ok(Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn rate(&self) -> f64 {
        self.p
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(tape.shape(x), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mul_const(x, &mask)
    }
}

fn maybe_drop(tape: &mut Tape, x: Var, dropout: Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Axis along which a block attends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// each node attends over the time steps of its own series
    Temporal,
    /// each time step attends over nodes
    Spatial,
}

/// Output of an attention block together with its attention weights,
/// `[N_h, B, L, Q, K]` where `L` is the axis not attended over.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q K^T / sqrt(d) + mask) V` over the last two axes.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Result<AttentionOutput> {
    let d = *tape
        .shape(q)
        .last()
        .ok_or_else(|| Error::shape("attention query is a scalar"))?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scores, mask)?;
    let output = tape.matmul(weights, v)?;
    Ok(AttentionOutput { output, weights })
}

/// Query/key/value/output projections and the trailing layer norm of one
/// attention block. Query, key and value maps are `[N_h, D, D/N_h]`, one
/// separate map per head; `W_O` is `D x D`. No biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dh = head_dim(d, n_heads)?;
        let mut w = |name: &str, store: &mut ParamStore| {
            store.add_uniform(format!("{prefix}.{name}"), &[n_heads, d, dh], d, dh, rng)
        };
        let wq = w("wq", store);
        let wk = w("wk", store);
        let wv = w("wv", store);
        let wo = store.add_uniform(format!("{prefix}.wo"), &[d, d], d, d, rng);
        Ok(AttentionParams {
            wq,
            wk,
            wv,
            wo,
            gamma: store.add(format!("{prefix}.ln_gamma"), Tensor::ones(&[d])),
            beta: store.add(format!("{prefix}.ln_beta"), Tensor::zeros(&[d])),
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * d * d + 2 * d
    }
}

/// Two `D x D` layers with a ReLU between, plus the trailing layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl FfnParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let w1 = store.add_uniform(format!("{prefix}.w1"), &[d, d], d, d, rng);
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[d]));
        let w2 = store.add_uniform(format!("{prefix}.w2"), &[d, d], d, d, rng);
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]));
        FfnParams {
            w1,
            b1,
            w2,
            b2,
            gamma: store.add(format!("{prefix}.ln_gamma"), Tensor::ones(&[d])),
            beta: store.add(format!("{prefix}.ln_beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn param_count(d: usize) -> usize {
        2 * d * d + 4 * d
    }
}

fn head_dim(d: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::param(format!("width {d} is not divisible by {n_heads} heads")));
    }
    Ok(d / n_heads)
}

/// Lifts `[T, N, D]` to `[1, T, N, D]`; returns whether it did.
fn batched(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    match tape.shape(x).len() {
        4 => Ok((x, false)),
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(tape.shape(x));
            Ok((tape.reshape(x, &s)?, true))
        }
        _ => Err(Error::shape(format!(
            "hidden state must be [T, N, D] or [B, T, N, D], got {:?}",
            tape.shape(x)
        ))),
    }
}

fn unbatched(tape: &mut Tape, x: Var, lifted: bool) -> Result<Var> {
    if lifted {
        let s = tape.shape(x)[1..].to_vec();
        tape.reshape(x, &s)
    } else {
        Ok(x)
    }
}

/// General attention block: queries from `query`, keys and values from
/// `memory`, residual on `query`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block(
    tape: &mut Tape,
    params: &AttentionParams,
    bound: &Bound,
    query: Var,
    memory: Var,
    axis: Axis,
    n_heads: usize,
    mask: Option<&Tensor>,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOutput> {
    let (query, lifted) = batched(tape, query)?;
    let (memory, _) = batched(tape, memory)?;
    if tape.shape(query) != tape.shape(memory) {
        return Err(Error::shape(format!(
            "query {:?} and memory {:?} differ",
            tape.shape(query),
            tape.shape(memory)
        )));
    }
    let s = tape.shape(query).to_vec();
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    let dh = head_dim(d, n_heads)?;
    for w in [params.wq, params.wk, params.wv] {
        if tape.shape(bound[w]) != [n_heads, d, dh] {
            return Err(Error::param(format!(
                "head projection {:?} does not match {n_heads} heads of width {dh}",
                tape.shape(bound[w])
            )));
        }
    }
    let swap = [0, 1, 3, 2, 4];
    let heads = |tape: &mut Tape, x: Var, w: ParamId| -> Result<Var> {
        let flat = tape.reshape(x, &[1, b * t * n, d])?;
        let p = tape.matmul(flat, bound[w])?;
        let h = tape.reshape(p, &[n_heads, b, t, n, dh])?;
        match axis {
            Axis::Temporal => tape.permute(h, &swap),
            Axis::Spatial => Ok(h),
        }
    };
    let q = heads(tape, query, params.wq)?;
    let k = heads(tape, memory, params.wk)?;
    let v = heads(tape, memory, params.wv)?;
    let att = scaled_dot_attention(tape, q, k, v, mask)?;
    let ctx = match axis {
        Axis::Temporal => tape.permute(att.output, &swap)?,
        Axis::Spatial => att.output,
    };
    let merged = tape.concat_heads(ctx)?;
    let out = tape.matmul(merged, bound[params.wo])?;
    let out = maybe_drop(tape, out, dropout)?;
    let res = tape.add(query, out)?;
    let normed = tape.layer_norm(res, bound[params.gamma], bound[params.beta])?;
    Ok(AttentionOutput {
        output: unbatched(tape, normed, lifted)?,
        weights: att.weights,
    })
}

/// Multi-head temporal attention: every node attends over all time steps
/// of its own window.
pub fn mta(
    tape: &mut Tape,
    params: &AttentionParams,
    bound: &Bound,
    h: Var,
    n_heads: usize,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOutput> {
    attention_block(tape, params, bound, h, h, Axis::Temporal, n_heads, None, dropout)
}

/// Multi-head spatial attention: at every time step each node attends over
/// the nodes allowed by `mask` (`None` means all nodes).
pub fn msa(
    tape: &mut Tape,
    params: &AttentionParams,
    bound: &Bound,
    h: Var,
    n_heads: usize,
    mask: Option<&Tensor>,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOutput> {
    attention_block(tape, params, bound, h, h, Axis::Spatial, n_heads, mask, dropout)
}

/// Multi-head spatial interaction attention: decoder queries attend over
/// the encoder output at the same time step.
#[allow(clippy::too_many_arguments)]
pub fn msia(
    tape: &mut Tape,
    params: &AttentionParams,
    bound: &Bound,
    h_dec: Var,
    h_enc: Var,
    n_heads: usize,
    mask: Option<&Tensor>,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOutput> {
    attention_block(tape, params, bound, h_dec, h_enc, Axis::Spatial, n_heads, mask, dropout)
}

/// `LN(H + relu(H W1 + b1) W2 + b2)`, dropout on the hidden activation.
pub fn ffn(
    tape: &mut Tape,
    params: &FfnParams,
    bound: &Bound,
    h: Var,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let a = tape.matmul(h, bound[params.w1])?;
    let a = tape.add(a, bound[params.b1])?;
    let a = tape.relu(a);
    let a = maybe_drop(tape, a, dropout)?;
    let b = tape.matmul(a, bound[params.w2])?;
    let b = tape.add(b, bound[params.b2])?;
    let res = tape.add(h, b)?;
    tape.layer_norm(res, bound[params.gamma], bound[params.beta])
}
