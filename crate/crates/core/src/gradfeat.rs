//! Per-example gradient features: token-averaged, restricted to a subset of
//! dense layers, flattened, and stored as 32-bit floats.
//!
//! Each selected layer contributes the column-stacked `vec` of its augmented
//! gradient `[∇W | ∇b]` (out × (in+1)), so a single token's contribution to a
//! layer is `a ⊗ g` and the layer's Fisher block is `A ⊗ G`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toylm::{self, Example, ModelConfig, Params, PerExampleGradient};

const MAGIC: &[u8; 4] = b"GDIG";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMode {
    Explicit,
    Stride,
    FinalOnly,
}

impl SelectorMode {
    fn code(self) -> u8 {
        match self {
            SelectorMode::Explicit => 0,
            SelectorMode::Stride => 1,
            SelectorMode::FinalOnly => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SelectorMode::Explicit),
            1 => Some(SelectorMode::Stride),
            2 => Some(SelectorMode::FinalOnly),
            _ => None,
        }
    }
}

/// Which dense layers contribute to a feature vector.
///
/// Hidden MLP layers are `0..L`; the output projection is layer `L`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    Explicit(Vec<usize>),
    /// Every `s`-th hidden MLP layer, starting at 0.
    Stride(usize),
    /// The output projection only.
    FinalOnly,
}

impl LayerSelector {
    /// Influence scoring uses every third MLP layer.
    pub fn influence_preset() -> Self {
        LayerSelector::Stride(3)
    }

    /// Diversity clustering uses the final layer.
    pub fn diversity_preset() -> Self {
        LayerSelector::FinalOnly
    }

    pub fn mode(&self) -> SelectorMode {
        match self {
            LayerSelector::Explicit(_) => SelectorMode::Explicit,
            LayerSelector::Stride(_) => SelectorMode::Stride,
            LayerSelector::FinalOnly => SelectorMode::FinalOnly,
        }
    }

    /// Selected dense-layer indices, ascending.
    pub fn resolve(&self, cfg: &ModelConfig) -> Result<Vec<usize>> {
        let layers = match self {
            LayerSelector::Explicit(list) => {
                let mut l = list.clone();
                l.sort_unstable();
                l.dedup();
                if let Some(&bad) = l.iter().find(|&&i| i >= cfg.num_dense_layers()) {
                    return Err(Error::Input(format!(
                        "layer {bad} out of range (model has {} dense layers)",
                        cfg.num_dense_layers()
                    )));
                }
                l
            }
            LayerSelector::Stride(0) => return Err(Error::Input("stride must be ≥ 1".into())),
            LayerSelector::Stride(s) => (0..cfg.num_mlp_layers).step_by(*s).collect(),
            LayerSelector::FinalOnly => vec![cfg.output_layer()],
        };
        if layers.is_empty() {
            return Err(Error::Input("layer selection is empty".into()));
        }
        Ok(layers)
    }
}

pub fn feature_dim(cfg: &ModelConfig, layers: &[usize]) -> usize {
    layers.iter().map(|&l| cfg.dense_param_count(l)).sum()
}

/// Flattens the selected layers of `grad` (scaled by `scale`) in `vec` layout.
pub fn select_blocks(grad: &PerExampleGradient, layers: &[usize], scale: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for &l in layers {
        let d = &grad.layout.dense[l];
        let w = grad.dense_weight(l);
        let b = grad.dense_bias(l);
        for i in 0..=d.in_dim {
            for o in 0..d.out_dim {
                let v = if i < d.in_dim { w[o * d.in_dim + i] } else { b[o] };
                out.push(v * scale);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn from_f64(id: impl Into<String>, values: &[f64]) -> Self {
        Self {
            id: id.into(),
            values: values.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn require_response(example: &Example) -> Result<()> {
    if example.response_tokens.is_empty() {
        return Err(Error::Degenerate {
            id: example.id.clone(),
            reason: "no response tokens to average over".into(),
        });
    }
    Ok(())
}

/// Token-averaged selected-layer gradient in 64-bit precision.
pub fn extract_f64(params: &Params, example: &Example, layers: &[usize]) -> Result<Vec<f64>> {
    require_response(example)?;
    let (_, grad) = toylm::loss_and_gradient(params, example)?;
    Ok(select_blocks(&grad, layers, 1.0 / grad.token_count as f64))
}

/// Token-summed selected-layer gradient: the gradient of the response loss itself.
pub fn summed_gradient(params: &Params, example: &Example, layers: &[usize]) -> Result<Vec<f64>> {
    let (_, grad) = toylm::loss_and_gradient(params, example)?;
    Ok(select_blocks(&grad, layers, 1.0))
}

pub fn extract(params: &Params, example: &Example, sel: &LayerSelector) -> Result<FeatureVector> {
    let layers = sel.resolve(params.config())?;
    let v = extract_f64(params, example, &layers)?;
    Ok(FeatureVector::from_f64(example.id.clone(), &v))
}

/// Row-major matrix of feature vectors plus the ids of its rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCache {
    pub mode: SelectorMode,
    pub layers: Vec<usize>,
    pub dim: usize,
    pub ids: Vec<String>,
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct IdRecord {
    row: usize,
    id: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.jsonl");
    PathBuf::from(s)
}

impl GradCache {
    pub fn from_features(
        mode: SelectorMode,
        layers: Vec<usize>,
        features: Vec<FeatureVector>,
    ) -> Result<Self> {
        let dim = features.first().map_or(0, FeatureVector::dim);
        let mut ids = Vec::with_capacity(features.len());
        let mut values = Vec::with_capacity(features.len() * dim);
        let mut seen = std::collections::HashSet::new();
        for f in features {
            if f.dim() != dim {
                return Err(Error::Shape(format!(
                    "feature `{}` has dim {}, expected {dim}",
                    f.id,
                    f.dim()
                )));
            }
            if !seen.insert(f.id.clone()) {
                return Err(Error::Input(format!("duplicate example id `{}`", f.id)));
            }
            values.extend_from_slice(&f.values);
            ids.push(f.id);
        }
        Ok(Self {
            mode,
            layers,
            dim,
            ids,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn feature(&self, i: usize) -> FeatureVector {
        FeatureVector {
            id: self.ids[i].clone(),
            values: self.row(i).to_vec(),
        }
    }

    pub fn features(&self) -> Vec<FeatureVector> {
        (0..self.count()).map(|i| self.feature(i)).collect()
    }

    /// Writes the binary cache to `path` and the id sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.count() as u64).to_le_bytes());
        header.extend_from_slice(&(self.dim as u64).to_le_bytes());
        header.push(self.mode.code());
        header.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for &l in &self.layers {
            header.extend_from_slice(&(l as u16).to_le_bytes());
        }
        w.write_all(&header).map_err(io)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;

        let side = sidecar_path(path);
        let mut s = BufWriter::new(File::create(&side).map_err(|e| Error::io(&side, e))?);
        for (row, id) in self.ids.iter().enumerate() {
            let line = serde_json::to_string(&IdRecord {
                row,
                id: id.clone(),
            })?;
            writeln!(s, "{line}").map_err(|e| Error::io(&side, e))?;
        }
        s.flush().map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |r: String| Error::format(path, r);
        if bytes.len() < 27 || &bytes[..4] != MAGIC {
            return Err(bad("missing GDIG header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let mode = SelectorMode::from_code(bytes[24])
            .ok_or_else(|| bad(format!("unknown selector mode {}", bytes[24])))?;
        let n_layers = u16::from_le_bytes(bytes[25..27].try_into().unwrap()) as usize;
        let body_start = 27 + 2 * n_layers;
        if bytes.len() < body_start {
            return Err(bad("truncated selector descriptor".into()));
        }
        let layers = bytes[27..body_start]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        let body = &bytes[body_start..];
        if body.len() != count * dim * 4 {
            return Err(bad(format!(
                "expected {} value bytes, found {}",
                count * dim * 4,
                body.len()
            )));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature value".into()));
        }

        let side = sidecar_path(path);
        let file = File::open(&side).map_err(|e| Error::io(&side, e))?;
        let mut ids = vec![None; count];
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&side, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: IdRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&side, format!("line {}: {e}", lineno + 1)))?;
            match ids.get_mut(rec.row) {
                Some(slot @ None) => *slot = Some(rec.id),
                _ => {
                    return Err(Error::format(
                        &side,
                        format!("line {}: bad or repeated row {}", lineno + 1, rec.row),
                    ))
                }
            }
        }
        let ids = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| id.ok_or_else(|| Error::format(&side, format!("row {i} has no id"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            layers,
            dim,
            ids,
            values,
        })
    }
}

/// Extracts features for every example and writes the cache to `path`.
pub fn batch_extract(
    params: &Params,
    data: &[Example],
    sel: &LayerSelector,
    path: &Path,
) -> Result<GradCache> {
    let cache = extract_all(params, data, sel)?;
    cache.write(path)?;
    Ok(cache)
}

/// In-memory variant of [`batch_extract`].
pub fn extract_all(params: &Params, data: &[Example], sel: &LayerSelector) -> Result<GradCache> {
    let layers = sel.resolve(params.config())?;
    let features = data
        .par_iter()
        .map(|ex| {
            extract_f64(params, ex, &layers).map(|v| FeatureVector::from_f64(ex.id.clone(), &v))
        })
        .collect::<Result<Vec<_>>>()?;
    GradCache::from_features(sel.mode(), layers, features)
}
