//! Pairwise influence of candidates on seed examples,
//! `I(z_m, z_t) = −∇L(z_t)ᵀ (H + λI)⁻¹ ∇L(z_m)`.
//!
//! A negative score means training on the candidate is predicted to lower the
//! seed example's loss.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::DampedInverse;
use crate::error::{Error, Result};
use crate::gradfeat::{FeatureVector, GradCache, SelectorMode};
use crate::numkit::dot;

/// Size of the trusted seed set used when none is configured.
pub const DEFAULT_SEED_SET_SIZE: usize = 256;

/// Trusted seed examples, represented by their gradient features.
#[derive(Clone, Debug)]
pub struct SeedSet {
    pub features: Vec<FeatureVector>,
}

impl SeedSet {
    pub fn new(features: Vec<FeatureVector>) -> Result<Self> {
        let dim = match features.first() {
            Some(f) => f.dim(),
            None => return Err(Error::Input("seed set is empty".into())),
        };
        if let Some(f) = features.iter().find(|f| f.dim() != dim) {
            return Err(Error::Shape(format!(
                "seed `{}` has dim {}, expected {dim}",
                f.id,
                f.dim()
            )));
        }
        Ok(Self { features })
    }

    pub fn from_cache(cache: &GradCache) -> Result<Self> {
        Self::new(cache.features())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].dim()
    }
}

fn check_dim(inv: &DampedInverse, dim: usize) -> Result<()> {
    if dim != inv.dim() {
        return Err(Error::Shape(format!(
            "feature dim {dim} against curvature dim {}",
            inv.dim()
        )));
    }
    Ok(())
}

/// Influence of candidate `g_m` on seed `g_t`.
pub fn influence_pair(inv: &DampedInverse, g_t: &FeatureVector, g_m: &FeatureVector) -> Result<f64> {
    check_dim(inv, g_m.dim())?;
    let h = inv.apply(&g_t.to_f64())?;
    Ok(-dot(&h, &g_m.to_f64()))
}

/// `−gᵀ (H + λI)⁻¹ g`; strictly negative for any non-zero `g`.
pub fn self_influence(inv: &DampedInverse, g: &FeatureVector) -> Result<f64> {
    let v = g.to_f64();
    Ok(-inv.quadratic_form(&v)?)
}

/// Candidates × seeds influence scores.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceMatrix {
    pub candidate_ids: Vec<String>,
    pub seed_ids: Vec<String>,
    /// Row-major, `candidates × seeds`.
    pub scores: Vec<f64>,
    pub lambda: f64,
    pub selector_mode: SelectorMode,
    pub layers: Vec<usize>,
}

impl InfluenceMatrix {
    pub fn rows(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.seed_ids.len()
    }

    pub fn get(&self, m: usize, t: usize) -> f64 {
        self.scores[m * self.cols() + t]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.scores[m * self.cols()..(m + 1) * self.cols()]
    }

    /// Restricts to the given candidate rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            candidate_ids: rows.iter().map(|&r| self.candidate_ids[r].clone()).collect(),
            scores: rows.iter().flat_map(|&r| self.row(r).to_vec()).collect(),
            ..self.clone()
        }
    }
}

/// Scores every candidate in `cand_cache` against every seed. The inverse
/// curvature is applied once per seed; each entry is then a dot product.
pub fn influence_matrix(
    inv: &DampedInverse,
    seeds: &SeedSet,
    cand_cache: &GradCache,
) -> Result<InfluenceMatrix> {
    check_dim(inv, seeds.dim())?;
    check_dim(inv, cand_cache.dim)?;
    let seed_h = seeds
        .features
        .par_iter()
        .map(|f| inv.apply(&f.to_f64()))
        .collect::<Result<Vec<_>>>()?;
    let n_seeds = seeds.len();
    let scores: Vec<f64> = (0..cand_cache.count())
        .into_par_iter()
        .flat_map_iter(|m| {
            let g = cand_cache.row_f64(m);
            seed_h.iter().map(move |h| -dot(h, &g)).collect::<Vec<_>>()
        })
        .collect();
    debug_assert_eq!(scores.len(), cand_cache.count() * n_seeds);
    Ok(InfluenceMatrix {
        candidate_ids: cand_cache.ids.clone(),
        seed_ids: seeds.features.iter().map(|f| f.id.clone()).collect(),
        scores,
        lambda: inv.lambda,
        selector_mode: cand_cache.mode,
        layers: cand_cache.layers.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    rows: usize,
    cols: usize,
    lambda: f64,
    selector_mode: SelectorMode,
    layers: Vec<usize>,
    candidate_ids: Vec<String>,
    seed_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// Writes a single-line JSON header, a newline, then `rows × cols` little-endian f64 scores.
pub fn write_matrix(m: &InfluenceMatrix, path: &Path, config_hash: Option<&str>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let header = Header {
        rows: m.rows(),
        cols: m.cols(),
        lambda: m.lambda,
        selector_mode: m.selector_mode,
        layers: m.layers.clone(),
        candidate_ids: m.candidate_ids.clone(),
        seed_ids: m.seed_ids.clone(),
        config_hash: config_hash.map(str::to_string),
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for v in &m.scores {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a matrix written by [`write_matrix`], returning the embedded config hash if any.
pub fn read_matrix(path: &Path) -> Result<(InfluenceMatrix, Option<String>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.candidate_ids.len() != header.rows || header.seed_ids.len() != header.cols {
        return Err(Error::format(path, "id lists disagree with dims"));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != header.rows * header.cols * 8 {
        return Err(Error::format(
            path,
            format!(
                "expected {} score bytes, found {}",
                header.rows * header.cols * 8,
                body.len()
            ),
        ));
    }
    let scores: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite score"));
    }
    Ok((
        InfluenceMatrix {
            candidate_ids: header.candidate_ids,
            seed_ids: header.seed_ids,
            scores,
            lambda: header.lambda,
            selector_mode: header.selector_mode,
            layers: header.layers,
        },
        header.config_hash,
    ))
}
