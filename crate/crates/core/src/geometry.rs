//! Model geometry, the grouped-query head→KV-group map, and per-head
//! projection slicing.
//!
//! Projection tensors are stored `[out_features, in_features]`; head `h`
//! (1-based) owns output rows `[(h-1)*d_k, h*d_k)` of `q_proj`. The
//! projection math works in `[in, out]` orientation (`X·W`), so slices are
//! returned transposed.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::store::Checkpoint;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub d_k: usize,
    pub d_v: usize,
}

const META_KEYS: [&str; 6] = ["n_layers", "d_model", "n_heads", "n_kv_groups", "d_k", "d_v"];

impl ModelGeometry {
    /// Geometry with the conventional head width `d_k = d_v = d_model / n_heads`.
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, n_kv_groups: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Geometry(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}; give d_k/d_v explicitly"
            )));
        }
        let d = d_model / n_heads;
        Self::with_head_dims(n_layers, d_model, n_heads, n_kv_groups, d, d)
    }

    pub fn with_head_dims(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        n_kv_groups: usize,
        d_k: usize,
        d_v: usize,
    ) -> Result<Self> {
        let g = Self { n_layers, d_model, n_heads, n_kv_groups, d_k, d_v };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.n_layers, self.d_model, self.n_heads, self.n_kv_groups, self.d_k, self.d_v];
        if fields.contains(&0) {
            return Err(Error::Geometry(format!("all geometry fields must be positive: {self:?}")));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return Err(Error::Geometry(format!(
                "n_heads {} is not a multiple of n_kv_groups {}",
                self.n_heads, self.n_kv_groups
            )));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_kv_groups
    }

    pub fn is_multi_head(&self) -> bool {
        self.n_heads == self.n_kv_groups
    }

    pub fn to_meta(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("geometry serializes to an object"),
        }
    }

    /// Parse geometry from a checkpoint meta block. Returns `Ok(None)` when
    /// the block carries no geometry at all.
    pub fn from_meta(meta: &Map<String, Value>) -> Result<Option<Self>> {
        if !META_KEYS.iter().any(|k| meta.contains_key(*k)) {
            return Ok(None);
        }
        let mut fields = Map::new();
        for k in META_KEYS {
            let v = meta.get(k).ok_or_else(|| Error::Geometry(format!("meta is missing `{k}`")))?;
            fields.insert(k.to_string(), v.clone());
        }
        let g: ModelGeometry = serde_json::from_value(Value::Object(fields))
            .map_err(|e| Error::Geometry(format!("bad geometry in meta: {e}")))?;
        g.validate()?;
        Ok(Some(g))
    }

    pub fn q_shape(&self) -> [usize; 2] {
        [self.n_heads * self.d_k, self.d_model]
    }

    pub fn k_shape(&self) -> [usize; 2] {
        [self.n_kv_groups * self.d_k, self.d_model]
    }

    pub fn v_shape(&self) -> [usize; 2] {
        [self.n_kv_groups * self.d_v, self.d_model]
    }

    pub fn o_shape(&self) -> [usize; 2] {
        [self.d_model, self.n_heads * self.d_v]
    }

    /// Names of every attention tensor the geometry requires.
    pub fn attention_tensor_names(&self) -> Vec<String> {
        (0..self.n_layers).flat_map(|l| Projection::ALL.iter().map(move |p| p.tensor_name(l))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn tensor_name(self, layer: usize) -> String {
        let p = match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        };
        format!("layers.{layer}.attn.{p}_proj.weight")
    }

    pub fn expected_shape(self, g: &ModelGeometry) -> [usize; 2] {
        match self {
            Projection::Q => g.q_shape(),
            Projection::K => g.k_shape(),
            Projection::V => g.v_shape(),
            Projection::O => g.o_shape(),
        }
    }
}

/// KV group (1-based) serving query head `head` (1-based): `⌈head·g/n⌉`.
pub fn kv_group_of(head: usize, geometry: &ModelGeometry) -> Result<usize> {
    if head == 0 || head > geometry.n_heads {
        return Err(Error::Range(format!("head {head} outside 1..={}", geometry.n_heads)));
    }
    Ok((head * geometry.n_kv_groups).div_ceil(geometry.n_heads))
}

/// A query head: 0-based layer, 1-based head index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadKey {
    pub layer: usize,
    pub head: usize,
}

impl HeadKey {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn validate(&self, geometry: &ModelGeometry) -> Result<()> {
        if self.layer >= geometry.n_layers {
            return Err(Error::Range(format!("layer {} outside 0..{}", self.layer, geometry.n_layers)));
        }
        kv_group_of(self.head, geometry).map(|_| ())
    }

    pub fn kv_group(&self, geometry: &ModelGeometry) -> Result<usize> {
        kv_group_of(self.head, geometry)
    }

    /// Position in the canonical enumeration.
    pub fn ordinal(&self, geometry: &ModelGeometry) -> usize {
        self.layer * geometry.n_heads + (self.head - 1)
    }
}

/// All heads in (layer, head) lexicographic order. This order is the
/// tie-break order everywhere downstream.
pub fn enumerate_heads(geometry: &ModelGeometry) -> Vec<HeadKey> {
    (0..geometry.n_layers).flat_map(|l| (1..=geometry.n_heads).map(move |h| HeadKey::new(l, h))).collect()
}

/// A head's query projection and its group's key/value projections, in
/// `[d_model, head_dim]` orientation and binary64.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSlices {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// One layer's q/k/v projections, decoded once for slicing many heads.
#[derive(Clone, Debug)]
pub struct LayerProjections {
    geometry: ModelGeometry,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl LayerProjections {
    pub fn load(ckpt: &Checkpoint, geometry: &ModelGeometry, layer: usize) -> Result<Self> {
        if layer >= geometry.n_layers {
            return Err(Error::Range(format!("layer {layer} outside 0..{}", geometry.n_layers)));
        }
        let fetch = |p: Projection| -> Result<Vec<f64>> {
            let name = p.tensor_name(layer);
            let (shape, data) = ckpt.tensor_f64(&name)?;
            let expected = p.expected_shape(geometry);
            if shape != expected {
                return Err(Error::Shape(format!("`{name}` has shape {shape:?}, geometry implies {expected:?}")));
            }
            Ok(data)
        };
        Ok(Self { geometry: *geometry, q: fetch(Projection::Q)?, k: fetch(Projection::K)?, v: fetch(Projection::V)? })
    }

    pub fn head(&self, head: usize) -> Result<HeadSlices> {
        let g = &self.geometry;
        let group = kv_group_of(head, g)?;
        let d = g.d_model;
        Ok(HeadSlices {
            wq: Tensor::from_f64(vec![d, g.d_k], transpose_rows(&self.q, d, (head - 1) * g.d_k, g.d_k))?,
            wk: Tensor::from_f64(vec![d, g.d_k], transpose_rows(&self.k, d, (group - 1) * g.d_k, g.d_k))?,
            wv: Tensor::from_f64(vec![d, g.d_v], transpose_rows(&self.v, d, (group - 1) * g.d_v, g.d_v))?,
        })
    }
}

/// Take `count` rows starting at `start` of a row-major `[rows, cols]`
/// matrix and return them transposed as `[cols, count]`.
fn transpose_rows(data: &[f64], cols: usize, start: usize, count: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols * count];
    for r in 0..count {
        let row = &data[(start + r) * cols..(start + r + 1) * cols];
        for (c, &x) in row.iter().enumerate() {
            out[c * count + r] = x;
        }
    }
    out
}

pub fn slice_head_projections(ckpt: &Checkpoint, geometry: &ModelGeometry, key: HeadKey) -> Result<HeadSlices> {
    key.validate(geometry)?;
    LayerProjections::load(ckpt, geometry, key.layer)?.head(key.head)
}
