//! Spatiotemporal embeddings: sinusoidal time codes, projected eigenmaps,
//! and their merge into one `T x N x D` tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// How the temporal and spatial embeddings are coupled before the final
/// linear map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Add,
    Concat,
    Multiply,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(MergeMode::Add),
            "concat" => Ok(MergeMode::Concat),
            "multiply" => Ok(MergeMode::Multiply),
            other => Err(Error::param(format!("unknown merge mode {other:?}"))),
        }
    }
}

/// Learnable parts of the embedding block.
#[derive(Clone, Debug, PartialEq)]
pub struct SteParams {
    pub d_model: usize,
    pub k: usize,
    pub merge_mode: MergeMode,
    /// k x D
    pub se_weight: ParamId,
    pub se_bias: ParamId,
    /// D x D, or 2D x D when concatenating
    pub ste_weight: ParamId,
    pub ste_bias: ParamId,
}

impl SteParams {
    pub fn init(
        store: &mut ParamStore,
        d_model: usize,
        k: usize,
        merge_mode: MergeMode,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let din = match merge_mode {
            MergeMode::Concat => 2 * d_model,
            _ => d_model,
        };
        SteParams {
            d_model,
            k,
            merge_mode,
            se_weight: store.add_uniform("ste.se_weight", &[k, d_model], k, d_model, rng),
            se_bias: store.add("ste.se_bias", Tensor::zeros(&[d_model])),
            ste_weight: store.add_uniform("ste.proj_weight", &[din, d_model], din, d_model, rng),
            ste_bias: store.add("ste.proj_bias", Tensor::zeros(&[d_model])),
        }
    }

    pub fn param_count(d_model: usize, k: usize, merge_mode: MergeMode) -> usize {
        let din = match merge_mode {
            MergeMode::Concat => 2 * d_model,
            _ => d_model,
        };
        k * d_model + d_model + din * d_model + d_model
    }
}

/// `TE[t, 2i] = sin(t / 10000^(2i/D))`, `TE[t, 2i+1] = cos(same)` for
/// window offsets `t = 0..T`.
pub fn temporal_embedding(steps: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::param(format!(
            "temporal embedding width must be even and positive, got {d_model}"
        )));
    }
    if steps == 0 {
        return Err(Error::param("temporal embedding needs at least one step"));
    }
    Ok(Tensor::from_fn(&[steps, d_model], |idx| {
        let (t, c) = (idx / d_model, idx % d_model);
        let pair = (c / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// `SE = SE_raw * W + b`.
pub fn project_spatial(tape: &mut Tape, se_raw: Var, weight: Var, bias: Var) -> Result<Var> {
    let (raw, w) = (tape.shape(se_raw), tape.shape(weight));
    if raw.len() != 2 || w.len() != 2 || raw[1] != w[0] {
        return Err(Error::shape(format!(
            "eigenmap {raw:?} does not match projection {w:?}"
        )));
    }
    let p = tape.matmul(se_raw, weight)?;
    tape.add(p, bias)
}

/// Broadcasts `TE [T, D]` over nodes and `SE [N, D]` over time, couples them
/// per `mode`, and applies the linear map `(weight, bias)`. Either input may
/// be absent (ablation); the other passes through alone.
pub fn merge_ste(
    tape: &mut Tape,
    te: Option<Var>,
    se: Option<Var>,
    steps: usize,
    nodes: usize,
    mode: MergeMode,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let d = tape.shape(weight).get(1).copied().ok_or_else(|| Error::shape("projection must be a matrix"))?;
    let te3 = match te {
        Some(v) => {
            if tape.shape(v) != [steps, d] {
                return Err(Error::shape(format!(
                    "temporal embedding {:?}, expected [{steps}, {d}]",
                    tape.shape(v)
                )));
            }
            Some(tape.reshape(v, &[steps, 1, d])?)
        }
        None => None,
    };
    let se3 = match se {
        Some(v) => {
            if tape.shape(v) != [nodes, d] {
                return Err(Error::shape(format!(
                    "spatial embedding {:?}, expected [{nodes}, {d}]",
                    tape.shape(v)
                )));
            }
            Some(tape.reshape(v, &[1, nodes, d])?)
        }
        None => None,
    };
    let full = Tensor::zeros(&[steps, nodes, d]);
    let expand = |tape: &mut Tape, v: Option<Var>| -> Result<Var> {
        let z = tape.constant(full.clone());
        match v {
            Some(v) => tape.add(v, z),
            None => Ok(z),
        }
    };
    let coupled = match (mode, te3, se3) {
        (MergeMode::Concat, a, b) => {
            let a = expand(tape, a)?;
            let b = expand(tape, b)?;
            tape.concat_last(a, b)?
        }
        (MergeMode::Add, Some(a), Some(b)) => tape.add(a, b)?,
        (MergeMode::Multiply, Some(a), Some(b)) => tape.mul(a, b)?,
        (_, a, None) => expand(tape, a)?,
        (_, None, b) => expand(tape, b)?,
    };
    let din = tape.shape(coupled)[2];
    if tape.shape(weight)[0] != din {
        return Err(Error::shape(format!(
            "coupled width {din} does not match projection {:?}",
            tape.shape(weight)
        )));
    }
    let p = tape.matmul(coupled, weight)?;
    tape.add(p, bias)
}

/// Flags removing parts of the embedding block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmbeddingSwitches {
    pub temporal: bool,
    pub spatial: bool,
}

/// The full `T x N x D` embedding for the given eigenmap, or `None` when
/// both parts are switched off.
pub fn spatiotemporal_embedding(
    tape: &mut Tape,
    params: &SteParams,
    bound: &Bound,
    eigenmap: &Tensor,
    steps: usize,
    switches: EmbeddingSwitches,
) -> Result<Option<Var>> {
    if !switches.temporal && !switches.spatial {
        return Ok(None);
    }
    let nodes = eigenmap.shape()[0];
    if eigenmap.shape() != [nodes, params.k] {
        return Err(Error::shape(format!(
            "eigenmap {:?} does not have width {}",
            eigenmap.shape(),
            params.k
        )));
    }
    let te = if switches.temporal {
        Some(tape.constant(temporal_embedding(steps, params.d_model)?))
    } else {
        None
    };
    let se = if switches.spatial {
        let raw = tape.constant(eigenmap.clone());
        Some(project_spatial(tape, raw, bound[params.se_weight], bound[params.se_bias])?)
    } else {
        None
    };
    merge_ste(
        tape,
        te,
        se,
        steps,
        nodes,
        params.merge_mode,
        bound[params.ste_weight],
        bound[params.ste_bias],
    )
    .map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn temporal_embedding_values() {
        let te = temporal_embedding(3, 8).unwrap();
        for c in 0..8 {
            assert_eq!(te.at(&[0, c]), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        let te = temporal_embedding(2, 2).unwrap();
        assert_abs_diff_eq!(te.at(&[1, 0]), 0.841471, epsilon = 1e-6);
        assert_abs_diff_eq!(te.at(&[1, 1]), 0.540302, epsilon = 1e-6);
        let big = temporal_embedding(50, 16).unwrap();
        assert!(big.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(temporal_embedding(4, 5), Err(Error::Parameter(_))));
        assert_eq!(temporal_embedding(7, 6).unwrap(), temporal_embedding(7, 6).unwrap());
    }

    #[test]
    fn identity_projection_copies_eigenmap() {
        let mut t = Tape::new();
        let raw = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.1);
        let w = Tensor::from_fn(&[2, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
        let (r, wv, b) = (t.constant(raw.clone()), t.constant(w), t.constant(Tensor::zeros(&[5])));
        let se = project_spatial(&mut t, r, wv, b).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                assert_eq!(t.value(se).at(&[i, c]), raw.at(&[i, c]));
            }
        }
        let z = t.constant(Tensor::zeros(&[2, 5]));
        let c = t.constant(Tensor::from_fn(&[5], |i| i as f64));
        let se = project_spatial(&mut t, r, z, c).unwrap();
        for i in 0..4 {
            assert_eq!(&t.value(se).data()[i * 5..i * 5 + 5], &[0.0, 1.0, 2.0, 3.0, 4.0]);
        }
        let bad = t.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(project_spatial(&mut t, r, bad, c), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Tensor::from_fn(&[5, 3], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[4], |_| rng.gen_range(-1.0..1.0));
        let err = grad_check(
            |t, v| {
                let r = t.constant(raw.clone());
                let se = project_spatial(t, r, v[0], v[1])?;
                let sq = t.mul(se, se)?;
                Ok(t.sum(sq))
            },
            &[w, b],
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn identity_merge(te: &Tensor, se: &Tensor) -> Tensor {
        let (steps, d) = (te.shape()[0], te.shape()[1]);
        let nodes = se.shape()[0];
        let mut t = Tape::new();
        let (a, b) = (t.constant(te.clone()), t.constant(se.clone()));
        let w = t.constant(Tensor::eye(d));
        let bias = t.constant(Tensor::zeros(&[d]));
        let out = merge_ste(&mut t, Some(a), Some(b), steps, nodes, MergeMode::Add, w, bias).unwrap();
        t.value(out).clone()
    }

    #[test]
    fn additive_merge_with_identity_projection() {
        let te = temporal_embedding(3, 8).unwrap();
        let se = Tensor::from_fn(&[5, 8], |i| (i as f64).cos());
        let ste = identity_merge(&te, &se);
        assert_eq!(ste.shape(), &[3, 5, 8]);
        for t in 0..3 {
            for i in 0..5 {
                for c in 0..8 {
                    assert_eq!(ste.at(&[t, i, c]), te.at(&[t, c]) + se.at(&[i, c]));
                }
            }
        }
        let flat = identity_merge(&te, &Tensor::zeros(&[5, 8]));
        for t in 0..3 {
            for i in 1..5 {
                for c in 0..8 {
                    assert_eq!(flat.at(&[t, i, c]), flat.at(&[t, 0, c]));
                }
            }
        }
    }

    #[test]
    fn node_differences_do_not_depend_on_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let te = temporal_embedding(12, 8).unwrap();
        let se = Tensor::from_fn(&[6, 8], |_| rng.gen_range(-1.0..1.0));
        let ste = identity_merge(&te, &se);
        for _ in 0..50 {
            let (t1, t2) = (rng.gen_range(0..12), rng.gen_range(0..12));
            let (i, j) = (rng.gen_range(0..6), rng.gen_range(0..6));
            for c in 0..8 {
                let d1 = ste.at(&[t1, i, c]) - ste.at(&[t1, j, c]);
                let d2 = ste.at(&[t2, i, c]) - ste.at(&[t2, j, c]);
                assert!((d1 - d2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_modes_are_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [MergeMode::Add, MergeMode::Concat, MergeMode::Multiply] {
            let din = if mode == MergeMode::Concat { 8 } else { 4 };
            let raw = Tensor::from_fn(&[3, 2], |_| rng.gen_range(-1.0..1.0));
            let inputs = vec![
                Tensor::from_fn(&[2, 4], |_| rng.gen_range(-1.0..1.0)),
                Tensor::from_fn(&[4], |_| rng.gen_range(-1.0..1.0)),
                Tensor::from_fn(&[din, 4], |_| rng.gen_range(-1.0..1.0)),
                Tensor::from_fn(&[4], |_| rng.gen_range(-1.0..1.0)),
            ];
            let weights = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(0.5..1.5));
            let err = grad_check(
                |t, v| {
                    let te = t.constant(temporal_embedding(2, 4)?);
                    let r = t.constant(raw.clone());
                    let se = project_spatial(t, r, v[0], v[1])?;
                    let ste = merge_ste(t, Some(te), Some(se), 2, 3, mode, v[2], v[3])?;
                    let w = t.mul_const(ste, &weights)?;
                    Ok(t.sum(w))
                },
                &inputs,
            )
            .unwrap();
            assert!(err < 1e-6, "{mode:?}: {err}");
        }
    }

    #[test]
    fn merge_shape_and_mismatch() {
        let mut t = Tape::new();
        let te = t.constant(Tensor::zeros(&[3, 8]));
        let se = t.constant(Tensor::zeros(&[5, 8]));
        let w = t.constant(Tensor::zeros(&[8, 8]));
        let b = t.constant(Tensor::zeros(&[8]));
        let out = merge_ste(&mut t, Some(te), Some(se), 3, 5, MergeMode::Add, w, b).unwrap();
        assert_eq!(t.shape(out), &[3, 5, 8]);
        assert!(merge_ste(&mut t, Some(te), Some(se), 3, 5, MergeMode::Concat, w, b).is_err());
        let bad = t.constant(Tensor::zeros(&[5, 4]));
        assert!(merge_ste(&mut t, Some(te), Some(bad), 3, 5, MergeMode::Add, w, b).is_err());
    }
}
