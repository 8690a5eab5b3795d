//! A small pre-norm GQA transformer with hand-written reverse mode.
//!
//! Block: `h += Wo·attn(rms(h))`, `h += Wdown·gelu(Wup·rms(h))`; learned
//! absolute positions; zero-initialized output head so the untrained model
//! predicts the uniform distribution.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::data::{Example, SEQ_LEN, VOCAB};
use super::kernels::{gelu, gelu_grad, linear, linear_backward, rmsnorm, rmsnorm_backward};
use crate::error::{Error, Result};
use crate::geometry::{kv_group_of, ModelGeometry, Projection};
use crate::rng::SplitMix64;
use crate::selection::TrainablePlan;
use crate::store::Checkpoint;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub geometry: ModelGeometry,
    pub vocab: usize,
    pub max_seq: usize,
    pub mlp_width: usize,
}

impl ModelConfig {
    pub fn new(geometry: ModelGeometry) -> Self {
        Self { geometry, vocab: VOCAB, max_seq: SEQ_LEN, mlp_width: 4 * geometry.d_model }
    }

    fn to_meta(self) -> Map<String, Value> {
        let mut meta = self.geometry.to_meta();
        meta.insert("vocab".into(), self.vocab.into());
        meta.insert("max_seq".into(), self.max_seq.into());
        meta.insert("mlp_width".into(), self.mlp_width.into());
        meta
    }

    fn from_meta(meta: &Map<String, Value>) -> Result<Self> {
        let geometry =
            ModelGeometry::from_meta(meta)?.ok_or_else(|| Error::Geometry("checkpoint carries no geometry".into()))?;
        let field = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")))
        };
        Ok(Self { geometry, vocab: field("vocab")?, max_seq: field("max_seq")?, mlp_width: field("mlp_width")? })
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(ModelGeometry::new(4, 64, 8, 2).expect("default geometry is valid"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    TokEmb,
    PosEmb,
    AttnNorm,
    Attn(Projection),
    MlpNorm,
    Up,
    Down,
    FinalNorm,
    Head,
}

impl ParamKind {
    fn is_norm(self) -> bool {
        matches!(self, ParamKind::AttnNorm | ParamKind::MlpNorm | ParamKind::FinalNorm)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub layer: Option<usize>,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Elements per leading-axis row.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn decays(&self) -> bool {
        !self.kind.is_norm()
    }
}

#[derive(Clone, Debug)]
struct LayerOffsets {
    attn_norm: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    mlp_norm: usize,
    up: usize,
    down: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    params: Vec<ParamInfo>,
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    final_norm: usize,
    head: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let g = &cfg.geometry;
        let d = g.d_model;
        let mut params = Vec::new();
        let mut total = 0;
        let mut push = |name: String, kind, layer, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            params.push(ParamInfo { name, kind, layer, shape, offset });
            offset
        };
        let tok = push("tok_emb.weight".into(), ParamKind::TokEmb, None, vec![cfg.vocab, d]);
        let pos = push("pos_emb.weight".into(), ParamKind::PosEmb, None, vec![cfg.max_seq, d]);
        let mut layers = Vec::new();
        for l in 0..g.n_layers {
            let attn_norm = push(format!("layers.{l}.attn_norm.weight"), ParamKind::AttnNorm, Some(l), vec![d]);
            let mut proj = [0; 4];
            for (slot, p) in proj.iter_mut().zip(Projection::ALL) {
                *slot = push(p.tensor_name(l), ParamKind::Attn(p), Some(l), p.expected_shape(g).to_vec());
            }
            let mlp_norm = push(format!("layers.{l}.mlp_norm.weight"), ParamKind::MlpNorm, Some(l), vec![d]);
            let up = push(format!("layers.{l}.mlp.up_proj.weight"), ParamKind::Up, Some(l), vec![cfg.mlp_width, d]);
            let down =
                push(format!("layers.{l}.mlp.down_proj.weight"), ParamKind::Down, Some(l), vec![d, cfg.mlp_width]);
            layers.push(LayerOffsets { attn_norm, q: proj[0], k: proj[1], v: proj[2], o: proj[3], mlp_norm, up, down });
        }
        let final_norm = push("final_norm.weight".into(), ParamKind::FinalNorm, None, vec![d]);
        let head = push("lm_head.weight".into(), ParamKind::Head, None, vec![cfg.vocab, d]);
        Self { params, tok, pos, layers, final_norm, head, total }
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamInfo> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Expected parameter count for a configuration.
    pub fn census(cfg: &ModelConfig) -> usize {
        let g = &cfg.geometry;
        let d = g.d_model;
        let attn = (g.n_heads * g.d_k + g.n_kv_groups * g.d_k + g.n_kv_groups * g.d_v) * d + d * g.n_heads * g.d_v;
        let mlp = 2 * cfg.mlp_width * d;
        let per_layer = attn + mlp + 2 * d;
        cfg.vocab * d + cfg.max_seq * d + g.n_layers * per_layer + d + d * cfg.vocab
    }
}

/// A contiguous row range of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamSlice {
    pub param: usize,
    pub rows: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceGrad {
    pub slice: ParamSlice,
    pub name: String,
    pub values: Vec<f64>,
}

/// Gradients for the trainable slices only; frozen slices have no entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub slices: Vec<SliceGrad>,
}

impl Gradients {
    /// Gradient of element `index` of tensor `name`, if that element is trainable.
    pub fn get(&self, layout: &Layout, name: &str, index: usize) -> Option<f64> {
        let info = layout.find(name)?;
        let row = index / info.cols();
        self.slices
            .iter()
            .find(|s| s.name == name && s.slice.rows.contains(&row))
            .map(|s| s.values[index - s.slice.rows.start * info.cols()])
    }

    pub fn covers(&self, name: &str, row: usize) -> bool {
        self.slices.iter().any(|s| s.name == name && s.slice.rows.contains(&row))
    }
}

/// Per-row trainability of the attention projections, derived from a plan.
#[derive(Clone, Debug)]
pub(crate) struct RowMask {
    q: Vec<Vec<bool>>,
    k: Vec<Vec<bool>>,
    v: Vec<Vec<bool>>,
}

impl RowMask {
    fn new(plan: &TrainablePlan) -> Self {
        let g = &plan.geometry;
        let rows = |count: usize, width: usize, f: &dyn Fn(usize) -> bool| -> Vec<bool> {
            (0..count * width).map(|r| f(r / width + 1)).collect()
        };
        let mut mask = RowMask { q: vec![], k: vec![], v: vec![] };
        for l in 0..g.n_layers {
            mask.q.push(rows(g.n_heads, g.d_k, &|h| plan.q_trainable(l, h)));
            mask.k.push(rows(g.n_kv_groups, g.d_k, &|j| plan.kv_trainable(l, j)));
            mask.v.push(rows(g.n_kv_groups, g.d_v, &|j| plan.kv_trainable(l, j)));
        }
        mask
    }

    fn for_projection(&self, p: Projection, layer: usize) -> Option<&[bool]> {
        match p {
            Projection::Q => Some(&self.q[layer]),
            Projection::K => Some(&self.k[layer]),
            Projection::V => Some(&self.v[layer]),
            Projection::O => None,
        }
    }
}

/// Trainable slices induced by a plan: whole tensors outside attention
/// q/k/v, per-head q rows, per-group k/v rows.
pub fn trainable_slices(layout: &Layout, plan: &TrainablePlan) -> Vec<ParamSlice> {
    let g = &plan.geometry;
    let mut out = Vec::new();
    for (idx, info) in layout.params.iter().enumerate() {
        match (info.kind, info.layer) {
            (ParamKind::Attn(Projection::Q), Some(l)) => {
                for &h in &plan.layers[l].q_heads {
                    out.push(ParamSlice { param: idx, rows: (h - 1) * g.d_k..h * g.d_k });
                }
            }
            (ParamKind::Attn(p @ (Projection::K | Projection::V)), Some(l)) => {
                let w = if p == Projection::K { g.d_k } else { g.d_v };
                for &j in &plan.layers[l].kv_groups {
                    out.push(ParamSlice { param: idx, rows: (j - 1) * w..j * w });
                }
            }
            _ => out.push(ParamSlice { param: idx, rows: 0..info.rows() }),
        }
    }
    out
}

#[derive(Clone, Debug)]
struct LayerCache {
    h_in: Vec<f64>,
    a: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head][t][s]`, zero above the diagonal.
    probs: Vec<f64>,
    o: Vec<f64>,
    h_mid: Vec<f64>,
    b: Vec<f64>,
    inv2: Vec<f64>,
    u: Vec<f64>,
    gu: Vec<f64>,
}

/// Activations of one sequence, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SequenceCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    h_out: Vec<f64>,
    f: Vec<f64>,
    inv_f: Vec<f64>,
    logits: Vec<f64>,
}

impl SequenceCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `[t, vocab]` logits.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Attention probabilities of `layer`, laid out `[head][t][s]`.
    pub fn attention(&self, layer: usize) -> &[f64] {
        &self.layers[layer].probs
    }

    /// Value vectors of `layer`, laid out `[t][group][d_v]`.
    pub fn values(&self, layer: usize) -> &[f64] {
        &self.layers[layer].v
    }

    /// Concatenated head outputs of `layer` before `o_proj`, laid out
    /// `[t][head][d_v]`.
    pub fn head_outputs(&self, layer: usize) -> &[f64] {
        &self.layers[layer].o
    }
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    /// 0-based KV group of each 0-based query head.
    groups: Vec<usize>,
}

pub fn init_model(config: ModelConfig, seed: u64) -> Result<ToyModel> {
    config.geometry.validate()?;
    if config.vocab == 0 || config.max_seq == 0 || config.mlp_width == 0 {
        return Err(Error::Value("vocab, max_seq and mlp_width must be positive".into()));
    }
    let layout = Layout::new(&config);
    assert_eq!(layout.total, Layout::census(&config), "parameter census mismatch");
    let mut rng = SplitMix64::new(seed);
    let mut params = vec![0.0; layout.total];
    for info in &layout.params {
        let dst = &mut params[info.range()];
        match info.kind {
            ParamKind::TokEmb | ParamKind::PosEmb => dst.iter_mut().for_each(|x| *x = rng.uniform(-1.0, 1.0)),
            ParamKind::AttnNorm | ParamKind::MlpNorm | ParamKind::FinalNorm => dst.fill(1.0),
            ParamKind::Head => dst.fill(0.0),
            ParamKind::Attn(_) | ParamKind::Up | ParamKind::Down => {
                let bound = 1.0 / (info.cols() as f64).sqrt();
                dst.iter_mut().for_each(|x| *x = rng.uniform(-bound, bound));
            }
        }
    }
    ToyModel::from_parts(config, params)
}

impl ToyModel {
    fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!("{} parameters, layout needs {}", params.len(), layout.total)));
        }
        let g = config.geometry;
        let groups = (1..=g.n_heads).map(|h| kv_group_of(h, &g).map(|j| j - 1)).collect::<Result<_>>()?;
        Ok(Self { config, layout, params, groups })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.config.geometry
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|p| &self.params[p.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range();
        Some(&mut self.params[range])
    }

    /// Remove one head's additive output contribution by zeroing its
    /// column block of `o_proj`.
    pub fn ablate_head(&mut self, layer: usize, head: usize) -> Result<()> {
        let g = self.config.geometry;
        kv_group_of(head, &g)?;
        if layer >= g.n_layers {
            return Err(Error::Range(format!("layer {layer} outside 0..{}", g.n_layers)));
        }
        let width = g.n_heads * g.d_v;
        let off = self.layout.layers[layer].o;
        for r in 0..g.d_model {
            let row = &mut self.params[off + r * width..off + (r + 1) * width];
            row[(head - 1) * g.d_v..head * g.d_v].fill(0.0);
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        self.layout
            .params
            .iter()
            .map(|p| {
                let t = Tensor::from_f64(p.shape.clone(), self.params[p.range()].to_vec())
                    .expect("layout shapes are valid");
                (p.name.clone(), t)
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_tensors(self.config.to_meta(), &self.to_tensors())
    }

    pub fn meta(&self) -> Map<String, Value> {
        self.config.to_meta()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(&ckpt.manifest().meta)?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        for p in &layout.params {
            let (shape, data) = ckpt.tensor_f64(&p.name)?;
            if shape != p.shape {
                return Err(Error::Shape(format!("`{}` has shape {shape:?}, expected {:?}", p.name, p.shape)));
            }
            params[p.range()].copy_from_slice(&data);
        }
        Self::from_parts(config, params)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq {
            return Err(Error::Value(format!("sequence length {} outside 1..={}", tokens.len(), self.config.max_seq)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Value(format!("token {bad} outside vocabulary of {}", self.config.vocab)));
        }
        Ok(())
    }

    /// Forward pass over one token sequence.
    pub fn forward_sequence(&self, tokens: &[u32]) -> Result<SequenceCache> {
        self.check_tokens(tokens)?;
        let g = &self.config.geometry;
        let (d, t_len, f_width) = (g.d_model, tokens.len(), self.config.mlp_width);
        let (n, kvg, dk, dv) = (g.n_heads, g.n_kv_groups, g.d_k, g.d_v);
        let p = &self.params;
        let l = &self.layout;

        let mut h = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let te = &p[l.tok + tok as usize * d..l.tok + (tok as usize + 1) * d];
            let pe = &p[l.pos + t * d..l.pos + (t + 1) * d];
            for ((hi, a), b) in h[t * d..(t + 1) * d].iter_mut().zip(te).zip(pe) {
                *hi = a + b;
            }
        }

        let scale = 1.0 / (dk as f64).sqrt();
        let mut layers = Vec::with_capacity(g.n_layers);
        for lo in &l.layers {
            let h_in = h;
            let (a, inv1) = rmsnorm(&h_in, &p[lo.attn_norm..lo.attn_norm + d], t_len, d);
            let q = linear(&a, &p[lo.q..], t_len, d, n * dk);
            let k = linear(&a, &p[lo.k..], t_len, d, kvg * dk);
            let v = linear(&a, &p[lo.v..], t_len, d, kvg * dv);

            let mut probs = vec![0.0; n * t_len * t_len];
            let mut o = vec![0.0; t_len * n * dv];
            for head in 0..n {
                let grp = self.groups[head];
                for t in 0..t_len {
                    let qt = &q[t * n * dk + head * dk..t * n * dk + (head + 1) * dk];
                    let row = &mut probs[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                    let mut max = f64::NEG_INFINITY;
                    for (s, r) in row.iter_mut().enumerate().take(t + 1) {
                        let ks = &k[s * kvg * dk + grp * dk..s * kvg * dk + (grp + 1) * dk];
                        *r = super::kernels::dot(qt, ks) * scale;
                        max = max.max(*r);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut().take(t + 1) {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    let ot = &mut o[t * n * dv + head * dv..t * n * dv + (head + 1) * dv];
                    for (s, r) in row.iter_mut().enumerate().take(t + 1) {
                        *r /= sum;
                        let vs = &v[s * kvg * dv + grp * dv..s * kvg * dv + (grp + 1) * dv];
                        super::kernels::axpy(*r, vs, ot);
                    }
                }
            }
            let attn = linear(&o, &p[lo.o..], t_len, n * dv, d);
            let h_mid: Vec<f64> = h_in.iter().zip(&attn).map(|(x, y)| x + y).collect();
            let (b, inv2) = rmsnorm(&h_mid, &p[lo.mlp_norm..lo.mlp_norm + d], t_len, d);
            let u = linear(&b, &p[lo.up..], t_len, d, f_width);
            let gu: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            let m = linear(&gu, &p[lo.down..], t_len, f_width, d);
            h = h_mid.iter().zip(&m).map(|(x, y)| x + y).collect();
            layers.push(LayerCache { h_in, a, inv1, q, k, v, probs, o, h_mid, b, inv2, u, gu });
        }
        let (f, inv_f) = rmsnorm(&h, &p[l.final_norm..l.final_norm + d], t_len, d);
        let logits = linear(&f, &p[l.head..], t_len, d, self.config.vocab);
        Ok(SequenceCache { tokens: tokens.to_vec(), layers, h_out: h, f, inv_f, logits })
    }

    /// Forward pass over a batch of sequences.
    pub fn forward(&self, batch: &[Vec<u32>]) -> Result<Vec<SequenceCache>> {
        batch.iter().map(|tokens| self.forward_sequence(tokens)).collect()
    }

    /// Mean token cross-entropy and token accuracy of a batch.
    pub fn evaluate_batch(&self, batch: &[Example]) -> Result<(f64, f64)> {
        let mut loss = RunningMean::default();
        let mut correct = 0usize;
        for ex in batch {
            check_example(ex)?;
            let cache = self.forward_sequence(&ex.input)?;
            for (t, &y) in ex.target.iter().enumerate() {
                let row = &cache.logits[t * self.config.vocab..(t + 1) * self.config.vocab];
                loss.push(cross_entropy(row, y as usize));
                correct += usize::from(argmax(row) == y as usize);
            }
        }
        if loss.count == 0 {
            return Err(Error::Value("empty batch".into()));
        }
        Ok((loss.mean, correct as f64 / loss.count as f64))
    }

    /// Mean token cross-entropy, forward only.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        self.evaluate_batch(batch).map(|(loss, _)| loss)
    }

    /// Mean cross-entropy and reverse-mode gradients for the slices `plan`
    /// leaves trainable. Weight gradients of frozen rows are never formed.
    pub fn loss_and_grads(&self, batch: &[Example], plan: &TrainablePlan) -> Result<(f64, Gradients)> {
        if plan.geometry != self.config.geometry {
            return Err(Error::Geometry("plan geometry differs from model geometry".into()));
        }
        let count: usize = batch.iter().map(|ex| ex.target.len()).sum();
        if count == 0 {
            return Err(Error::Value("empty batch".into()));
        }
        let mask = RowMask::new(plan);
        let mut grad = vec![0.0; self.layout.total];
        let mut loss = RunningMean::default();
        let inv_count = 1.0 / count as f64;
        for ex in batch {
            check_example(ex)?;
            let cache = self.forward_sequence(&ex.input)?;
            self.backward_sequence(&cache, &ex.target, inv_count, &mask, &mut grad, &mut loss);
        }
        let slices = trainable_slices(&self.layout, plan)
            .into_iter()
            .map(|slice| {
                let info = &self.layout.params[slice.param];
                let cols = info.cols();
                let start = info.offset + slice.rows.start * cols;
                let end = info.offset + slice.rows.end * cols;
                SliceGrad { name: info.name.clone(), values: grad[start..end].to_vec(), slice }
            })
            .collect();
        Ok((loss.mean, Gradients { slices }))
    }

    /// Accumulates `weight`-scaled gradients into `grad` and the token
    /// losses into `loss`.
    fn backward_sequence(
        &self,
        cache: &SequenceCache,
        targets: &[u32],
        weight: f64,
        mask: &RowMask,
        grad: &mut [f64],
        loss: &mut RunningMean,
    ) {
        let g = &self.config.geometry;
        let (d, t_len, f_width, vocab) = (g.d_model, cache.len(), self.config.mlp_width, self.config.vocab);
        let (n, kvg, dk, dv) = (g.n_heads, g.n_kv_groups, g.d_k, g.d_v);
        let p = &self.params;
        let l = &self.layout;

        let mut dlogits = vec![0.0; t_len * vocab];
        for (t, &y) in targets.iter().enumerate() {
            let row = &cache.logits[t * vocab..(t + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            loss.push(sum.ln() + max - row[y as usize]);
            for (j, dz) in dlogits[t * vocab..(t + 1) * vocab].iter_mut().enumerate() {
                let prob = (row[j] - max).exp() / sum;
                *dz = weight * (prob - if j == y as usize { 1.0 } else { 0.0 });
            }
        }

        let mut df = vec![0.0; t_len * d];
        let head_range = l.head..l.head + vocab * d;
        linear_backward(
            &dlogits,
            &cache.f,
            &p[head_range.clone()],
            t_len,
            d,
            vocab,
            &mut df,
            Some(&mut grad[head_range]),
            None,
        );
        let mut dh = vec![0.0; t_len * d];
        let fnr = l.final_norm..l.final_norm + d;
        rmsnorm_backward(&df, &cache.h_out, &cache.inv_f, &p[fnr.clone()], t_len, d, &mut dh, &mut grad[fnr]);

        let scale = 1.0 / (dk as f64).sqrt();
        for (li, (lo, lc)) in l.layers.iter().zip(&cache.layers).enumerate().rev() {
            // MLP branch: dh flows to h_mid directly and through the MLP.
            let mut dgu = vec![0.0; t_len * f_width];
            let down = lo.down..lo.down + d * f_width;
            linear_backward(&dh, &lc.gu, &p[down.clone()], t_len, f_width, d, &mut dgu, Some(&mut grad[down]), None);
            let du: Vec<f64> = dgu.iter().zip(&lc.u).map(|(gv, &x)| gv * gelu_grad(x)).collect();
            let mut db = vec![0.0; t_len * d];
            let up = lo.up..lo.up + f_width * d;
            linear_backward(&du, &lc.b, &p[up.clone()], t_len, d, f_width, &mut db, Some(&mut grad[up]), None);
            let mut dh_mid = dh;
            let mn = lo.mlp_norm..lo.mlp_norm + d;
            rmsnorm_backward(&db, &lc.h_mid, &lc.inv2, &p[mn.clone()], t_len, d, &mut dh_mid, &mut grad[mn]);

            // Attention branch.
            let mut d_o = vec![0.0; t_len * n * dv];
            let o_range = lo.o..lo.o + d * n * dv;
            linear_backward(
                &dh_mid,
                &lc.o,
                &p[o_range.clone()],
                t_len,
                n * dv,
                d,
                &mut d_o,
                Some(&mut grad[o_range]),
                None,
            );

            let mut dq = vec![0.0; t_len * n * dk];
            let mut dk_buf = vec![0.0; t_len * kvg * dk];
            let mut dv_buf = vec![0.0; t_len * kvg * dv];
            let mut dp = vec![0.0; t_len];
            for head in 0..n {
                let grp = self.groups[head];
                for t in 0..t_len {
                    let probs = &lc.probs[(head * t_len + t) * t_len..(head * t_len + t) * t_len + t + 1];
                    let dot_t = &d_o[t * n * dv + head * dv..t * n * dv + (head + 1) * dv];
                    let mut mean = 0.0;
                    for s in 0..=t {
                        let vs = &lc.v[s * kvg * dv + grp * dv..s * kvg * dv + (grp + 1) * dv];
                        dp[s] = super::kernels::dot(dot_t, vs);
                        mean += probs[s] * dp[s];
                        super::kernels::axpy(
                            probs[s],
                            dot_t,
                            &mut dv_buf[s * kvg * dv + grp * dv..s * kvg * dv + (grp + 1) * dv],
                        );
                    }
                    let qt = t * n * dk + head * dk;
                    for s in 0..=t {
                        let ds = probs[s] * (dp[s] - mean) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ks = s * kvg * dk + grp * dk;
                        super::kernels::axpy(ds, &lc.k[ks..ks + dk], &mut dq[qt..qt + dk]);
                        super::kernels::axpy(ds, &lc.q[qt..qt + dk], &mut dk_buf[ks..ks + dk]);
                    }
                }
            }

            let mut da = vec![0.0; t_len * d];
            for (proj, off, dy, width) in [
                (Projection::Q, lo.q, &dq, n * dk),
                (Projection::K, lo.k, &dk_buf, kvg * dk),
                (Projection::V, lo.v, &dv_buf, kvg * dv),
            ] {
                let rows = mask.for_projection(proj, li).expect("q/k/v have row masks");
                let range = off..off + width * d;
                let dw = rows.iter().any(|&r| r).then(|| &mut grad[range.clone()]);
                linear_backward(dy, &lc.a, &p[range.clone()], t_len, d, width, &mut da, dw, Some(rows));
            }
            let an = lo.attn_norm..lo.attn_norm + d;
            rmsnorm_backward(&da, &lc.h_in, &lc.inv1, &p[an.clone()], t_len, d, &mut dh_mid, &mut grad[an]);
            dh = dh_mid;
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            let src = &dh[t * d..(t + 1) * d];
            let te = l.tok + tok as usize * d;
            super::kernels::axpy(1.0, src, &mut grad[te..te + d]);
            let pe = l.pos + t * d;
            super::kernels::axpy(1.0, src, &mut grad[pe..pe + d]);
        }
    }
}

/// Incremental mean; exact when every sample is equal.
#[derive(Default)]
struct RunningMean {
    mean: f64,
    count: usize,
}

impl RunningMean {
    fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }
}

fn check_example(ex: &Example) -> Result<()> {
    if ex.input.len() != ex.target.len() {
        return Err(Error::Shape(format!(
            "input length {} differs from target length {}",
            ex.input.len(),
            ex.target.len()
        )));
    }
    Ok(())
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    sum.ln() + max - logits[target]
}

/// Index of the largest logit; the first one wins ties.
fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best }).0
}
