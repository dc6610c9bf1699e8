//! The encoder-decoder: input and output embeddings, STE injection, stacked
//! attention layers, the linear head, ablation switches and checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{self, spatial_mask, AttentionParams, Dropout, FfnParams};
use crate::embedding::{spatiotemporal_embedding, EmbeddingSwitches, MergeMode, SteParams};
use crate::error::{Error, Result};
use crate::graph::{default_k, GraphFeatures, KeepRule, SensorGraph};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::NormStats;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder: usize,
    pub n_decoder: usize,
    pub dropout: f64,
    pub channels: usize,
    /// Eigenmap width; `None` means `min(16, N - 1)`.
    pub k_eigen: Option<usize>,
    pub merge_mode: MergeMode,
    /// Apply the spatial mask inside interaction attention as well.
    pub msia_mask: bool,
    /// Window length `T` the model is trained and applied on.
    pub window: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            d_model: 64,
            n_heads: 4,
            n_encoder: 2,
            n_decoder: 2,
            dropout: 0.2,
            channels: 1,
            k_eigen: None,
            merge_mode: MergeMode::Add,
            msia_mask: false,
            window: 24,
        }
    }
}

impl Hyper {
    /// The eigenmap width for a graph of `nodes` nodes.
    pub fn k_for(&self, nodes: usize) -> usize {
        self.k_eigen.unwrap_or_else(|| default_k(nodes))
    }

    pub fn validate(&self, nodes: Option<usize>) -> Result<()> {
        let fail = |m: String| Err(Error::param(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.n_encoder == 0 || self.n_decoder == 0 {
            return fail("at least one encoder and one decoder layer are required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.window == 0 {
            return fail("window must be positive".into());
        }
        if self.k_eigen == Some(0) {
            return fail("k_eigen must be positive".into());
        }
        if let Some(n) = nodes {
            let k = self.k_for(n);
            if n < 2 || k >= n {
                return fail(format!("k_eigen {k} must be below the node count {n}"));
            }
        }
        Ok(())
    }
}

/// Model variants that remove one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "no_TE")]
    NoTe,
    #[serde(rename = "no_SE")]
    NoSe,
    #[serde(rename = "no_STE")]
    NoSte,
    #[serde(rename = "no_MTA")]
    NoMta,
    #[serde(rename = "no_MSA")]
    NoMsa,
    #[serde(rename = "no_MSIA")]
    NoMsia,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::NoTe,
        Ablation::NoSe,
        Ablation::NoSte,
        Ablation::NoMta,
        Ablation::NoMsa,
        Ablation::NoMsia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoTe => "no_TE",
            Ablation::NoSe => "no_SE",
            Ablation::NoSte => "no_STE",
            Ablation::NoMta => "no_MTA",
            Ablation::NoMsa => "no_MSA",
            Ablation::NoMsia => "no_MSIA",
        }
    }

    fn switches(self) -> EmbeddingSwitches {
        EmbeddingSwitches {
            temporal: !matches!(self, Ablation::NoTe | Ablation::NoSte),
            spatial: !matches!(self, Ablation::NoSe | Ablation::NoSte),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s) || (s == "full" && *a == Ablation::None))
            .ok_or_else(|| Error::param(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderLayer {
    mta: AttentionParams,
    msa: AttentionParams,
    msia: AttentionParams,
    ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    mta: AttentionParams,
    msa: AttentionParams,
    ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    input_w: ParamId,
    input_b: ParamId,
    output_w: ParamId,
    output_b: ParamId,
    ste: SteParams,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

fn build(hyper: &Hyper, k: usize, rng: &mut ChaCha8Rng) -> Result<(ParamStore, Layout)> {
    let (c, d, h) = (hyper.channels, hyper.d_model, hyper.n_heads);
    let mut s = ParamStore::new();
    let input_w = s.add_uniform("input.weight", &[c, d], c, d, rng);
    let input_b = s.add("input.bias", Tensor::zeros(&[d]));
    let output_w = s.add_uniform("output_embedding.weight", &[c, d], c, d, rng);
    let output_b = s.add("output_embedding.bias", Tensor::zeros(&[d]));
    let ste = SteParams::init(&mut s, d, k, hyper.merge_mode, rng);
    let mut encoder = Vec::with_capacity(hyper.n_encoder);
    for l in 0..hyper.n_encoder {
        encoder.push(EncoderLayer {
            mta: AttentionParams::init(&mut s, &format!("encoder.{l}.mta"), d, h, rng)?,
            msa: AttentionParams::init(&mut s, &format!("encoder.{l}.msa"), d, h, rng)?,
            ffn: FfnParams::init(&mut s, &format!("encoder.{l}.ffn"), d, rng),
        });
    }
    let mut decoder = Vec::with_capacity(hyper.n_decoder);
    for l in 0..hyper.n_decoder {
        decoder.push(DecoderLayer {
            mta: AttentionParams::init(&mut s, &format!("decoder.{l}.mta"), d, h, rng)?,
            msa: AttentionParams::init(&mut s, &format!("decoder.{l}.msa"), d, h, rng)?,
            msia: AttentionParams::init(&mut s, &format!("decoder.{l}.msia"), d, h, rng)?,
            ffn: FfnParams::init(&mut s, &format!("decoder.{l}.ffn"), d, rng),
        });
    }
    let head_w = s.add_uniform("head.weight", &[d, c], d, c, rng);
    let head_b = s.add("head.bias", Tensor::zeros(&[c]));
    let layout = Layout {
        input_w,
        input_b,
        output_w,
        output_b,
        ste,
        encoder,
        decoder,
        head_w,
        head_b,
    };
    Ok((s, layout))
}

/// Closed-form number of scalar parameters.
pub fn param_count(hyper: &Hyper, k: usize) -> usize {
    let (c, d) = (hyper.channels, hyper.d_model);
    let att = AttentionParams::param_count(d);
    let ffn = FfnParams::param_count(d);
    2 * (c * d + d)
        + SteParams::param_count(d, k, hyper.merge_mode)
        + hyper.n_encoder * (2 * att + ffn)
        + hyper.n_decoder * (3 * att + ffn)
        + d * c
        + c
}

/// A Kriformer bound to one sensor graph.
#[derive(Clone, Debug, PartialEq)]
pub struct KriformerModel {
    hyper: Hyper,
    ablation: Ablation,
    params: ParamStore,
    layout: Layout,
    /// `N x k` raw eigenmap.
    eigenmap: Tensor,
    /// `N x N` additive spatial mask.
    mask: Tensor,
    node_ids: Vec<String>,
    graph_fingerprint: String,
    /// Standardization fitted on the training data, if trained.
    pub norm: Option<NormStats>,
}

impl KriformerModel {
    /// Builds a model from precomputed graph features.
    pub fn new(
        hyper: Hyper,
        features: &GraphFeatures,
        node_ids: Vec<String>,
        graph_fingerprint: String,
        seed: u64,
    ) -> Result<Self> {
        let n = features.eigenmap.shape()[0];
        hyper.validate(Some(n))?;
        let k = features.eigenmap.shape()[1];
        if k != hyper.k_for(n) {
            return Err(Error::param(format!(
                "eigenmap width {k} does not match k_eigen {}",
                hyper.k_for(n)
            )));
        }
        if node_ids.len() != n {
            return Err(Error::shape(format!("{} node ids for {n} nodes", node_ids.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build(&hyper, k, &mut rng)?;
        Ok(KriformerModel {
            hyper,
            ablation: Ablation::None,
            params,
            layout,
            eigenmap: features.eigenmap.clone(),
            mask: spatial_mask(&features.adjacency)?,
            node_ids,
            graph_fingerprint: String::new(),
            norm: None,
        }
        .with_fingerprint(graph_fingerprint))
    }

    fn with_fingerprint(mut self, fp: String) -> Self {
        self.graph_fingerprint = fp;
        self
    }

    /// Computes the graph features and initializes parameters from `seed`.
    pub fn init(hyper: Hyper, graph: &SensorGraph, rule: KeepRule, seed: u64) -> Result<Self> {
        hyper.validate(Some(graph.len()))?;
        let features = GraphFeatures::compute(graph, rule, hyper.k_for(graph.len()))?;
        Self::new(
            hyper,
            &features,
            graph.node_ids().to_vec(),
            graph.fingerprint(),
            seed,
        )
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn nodes(&self) -> usize {
        self.eigenmap.shape()[0]
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn graph_fingerprint(&self) -> &str {
        &self.graph_fingerprint
    }

    pub fn eigenmap(&self) -> &Tensor {
        &self.eigenmap
    }

    pub fn spatial_mask(&self) -> &Tensor {
        &self.mask
    }

    /// Replaces the raw eigenmap and spatial mask, e.g. after relabeling
    /// nodes.
    pub fn set_graph_inputs(&mut self, eigenmap: Tensor, mask: Tensor) -> Result<()> {
        let (n, k) = (self.nodes(), self.eigenmap.shape()[1]);
        if eigenmap.shape() != [n, k] || mask.shape() != [n, n] {
            return Err(Error::shape(format!(
                "graph inputs {:?} / {:?} do not match {n} nodes, k = {k}",
                eigenmap.shape(),
                mask.shape()
            )));
        }
        self.eigenmap = eigenmap;
        self.mask = mask;
        Ok(())
    }

    /// Names of the parameters an ablation leaves unused.
    pub fn unused_params(&self) -> Vec<ParamId> {
        let l = &self.layout;
        let att = |a: &AttentionParams| vec![a.wq, a.wk, a.wv, a.wo, a.gamma, a.beta];
        let mut out = Vec::new();
        let sw = self.ablation.switches();
        if !sw.spatial {
            out.extend([l.ste.se_weight, l.ste.se_bias]);
        }
        if !sw.temporal && !sw.spatial {
            out.extend([l.ste.ste_weight, l.ste.ste_bias]);
        }
        for e in &l.encoder {
            match self.ablation {
                Ablation::NoMta => out.extend(att(&e.mta)),
                Ablation::NoMsa => out.extend(att(&e.msa)),
                _ => {}
            }
        }
        for d in &l.decoder {
            match self.ablation {
                Ablation::NoMta => out.extend(att(&d.mta)),
                Ablation::NoMsa => out.extend(att(&d.msa)),
                Ablation::NoMsia => out.extend(att(&d.msia)),
                _ => {}
            }
        }
        out
    }

    /// Inference forward pass: `[T, N, C]` or `[B, T, N, C]` in, same shape
    /// out. Dropout is off.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward_on_tape(&mut tape, &bound, xv, None)?;
        Ok(tape.value(y).clone())
    }

    /// Records the forward pass on `tape` with parameters `bound`. Dropout is
    /// active when `dropout` is given.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (n, c) = (self.nodes(), self.hyper.channels);
        let ok = matches!(shape.len(), 3 | 4)
            && shape[shape.len() - 1] == c
            && shape[shape.len() - 2] == n
            && shape[shape.len() - 3] > 0;
        if !ok {
            return Err(Error::shape(format!(
                "input {shape:?} does not match [B, T, {n}, {c}]"
            )));
        }
        let steps = shape[shape.len() - 3];
        let l = &self.layout;
        let h = self.hyper.n_heads;
        let ste = spatiotemporal_embedding(
            tape,
            &l.ste,
            bound,
            &self.eigenmap,
            steps,
            self.ablation.switches(),
        )?;
        let embed = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
            let e = tape.matmul(x, bound[w])?;
            let e = tape.add(e, bound[b])?;
            match ste {
                Some(s) => tape.add(e, s),
                None => Ok(e),
            }
        };

        let mut enc = embed(tape, l.input_w, l.input_b)?;
        for layer in &l.encoder {
            if self.ablation != Ablation::NoMta {
                enc = attention::mta(tape, &layer.mta, bound, enc, h, dropout.as_deref_mut())?.output;
            }
            if self.ablation != Ablation::NoMsa {
                enc = attention::msa(
                    tape,
                    &layer.msa,
                    bound,
                    enc,
                    h,
                    Some(&self.mask),
                    dropout.as_deref_mut(),
                )?
                .output;
            }
            enc = attention::ffn(tape, &layer.ffn, bound, enc, dropout.as_deref_mut())?;
        }

        let mut dec = embed(tape, l.output_w, l.output_b)?;
        let msia_mask = self.hyper.msia_mask.then_some(&self.mask);
        for layer in &l.decoder {
            if self.ablation != Ablation::NoMta {
                dec = attention::mta(tape, &layer.mta, bound, dec, h, dropout.as_deref_mut())?.output;
            }
            if self.ablation != Ablation::NoMsa {
                dec = attention::msa(
                    tape,
                    &layer.msa,
                    bound,
                    dec,
                    h,
                    Some(&self.mask),
                    dropout.as_deref_mut(),
                )?
                .output;
            }
            if self.ablation != Ablation::NoMsia {
                dec = attention::msia(
                    tape,
                    &layer.msia,
                    bound,
                    dec,
                    enc,
                    h,
                    msia_mask,
                    dropout.as_deref_mut(),
                )?
                .output;
            }
            dec = attention::ffn(tape, &layer.ffn, bound, dec, dropout.as_deref_mut())?;
        }
        let y = tape.matmul(dec, bound[l.head_w])?;
        tape.add(y, bound[l.head_b])
    }

    /// Serializes the model; see [`KriformerModel::load`].
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<TensorEntry> = self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let extra = self.extra_tensors();
        tensors.extend(extra.iter().map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        }));
        let meta = Metadata {
            hyper: self.hyper.clone(),
            ablation: self.ablation,
            node_ids: self.node_ids.clone(),
            graph_fingerprint: self.graph_fingerprint.clone(),
            normalized: self.norm.is_some(),
            tensors,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Load(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors().iter().chain(extra.iter().map(|(_, t)| t)) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    fn extra_tensors(&self) -> Vec<(&'static str, Tensor)> {
        let mut v = vec![
            ("graph.eigenmap", self.eigenmap.clone()),
            ("graph.spatial_mask", self.mask.clone()),
        ];
        if let Some(n) = &self.norm {
            v.push(("norm.mean_std", Tensor::from_fn(&[2], |i| [n.mean, n.std][i])));
        }
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Load(m.to_string());
        let head = MAGIC.len() + 4 + 8;
        if bytes.len() < head + 32 {
            return Err(fail("checkpoint is truncated"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch: checkpoint is truncated or corrupt"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Load(format!(
                "checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(head..head.saturating_add(json_len))
            .ok_or_else(|| fail("metadata runs past end of file"))?;
        let meta: Metadata =
            serde_json::from_slice(json).map_err(|e| Error::Load(format!("bad metadata: {e}")))?;
        let mut payload = &body[head + json_len..];
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if payload.len() < 8 * n {
                return Err(fail("tensor payload is truncated"));
            }
            let (chunk, rest) = payload.split_at(8 * n);
            payload = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };

        let nodes = meta.node_ids.len();
        meta.hyper
            .validate(Some(nodes))
            .map_err(|e| Error::Load(format!("invalid hyperparameters: {e}")))?;
        let k = meta.hyper.k_for(nodes);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut params, layout) = build(&meta.hyper, k, &mut rng)?;
        let n_params = params.len();
        let expected_extra = if meta.normalized { 3 } else { 2 };
        if meta.tensors.len() != n_params + expected_extra {
            return Err(fail("tensor table does not match the architecture"));
        }
        for (i, entry) in meta.tensors[..n_params].iter().enumerate() {
            let name = &params.names()[i];
            let slot = &params.tensors()[i];
            if &entry.name != name || entry.shape != slot.shape() {
                return Err(Error::Load(format!(
                    "tensor {} {:?} where {} {:?} was expected",
                    entry.name,
                    entry.shape,
                    name,
                    slot.shape()
                )));
            }
            params.tensors_mut()[i] = read(&entry.shape)?;
        }
        let eigenmap = read(&[nodes, k])?;
        let mask = read(&[nodes, nodes])?;
        let norm = if meta.normalized {
            let t = read(&[2])?;
            Some(NormStats::new(t.data()[0], t.data()[1])?)
        } else {
            None
        };
        if !payload.is_empty() {
            return Err(fail("trailing bytes after tensor payload"));
        }
        Ok(KriformerModel {
            hyper: meta.hyper,
            ablation: meta.ablation,
            params,
            layout,
            eigenmap,
            mask,
            node_ids: meta.node_ids,
            graph_fingerprint: meta.graph_fingerprint,
            norm,
        })
    }
}

const MAGIC: &[u8; 8] = b"KRIFORMR";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    hyper: Hyper,
    ablation: Ablation,
    node_ids: Vec<String>,
    graph_fingerprint: String,
    normalized: bool,
    tensors: Vec<TensorEntry>,
}
