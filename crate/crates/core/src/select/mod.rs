//! Candidate selection: the all-seeds-benefit quality filter, then diversity
//! resampling over randomly projected, k-means-clustered gradient features.

mod kmeans;

pub use kmeans::{kmeans, ClusterModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradfeat::FeatureVector;
use crate::influence::InfluenceMatrix;
use crate::numkit::{project_rows, random_projection, Matrix, Rng};

pub const DEFAULT_PROJ_DIM: usize = 400;
pub const DEFAULT_K_CLUSTERS: usize = 512;
pub const DEFAULT_KMEANS_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "tau")]
pub enum QualityCriterion {
    /// Every seed must be helped: all scores in the row are negative.
    Strict,
    /// At least `τ · #seeds` scores in the row are negative.
    Fraction(f64),
}

impl Default for QualityCriterion {
    fn default() -> Self {
        QualityCriterion::Strict
    }
}

impl QualityCriterion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            QualityCriterion::Fraction(t) if !(t > 0.0 && t <= 1.0) => Err(Error::Input(format!(
                "fraction threshold must lie in (0, 1], got {t}"
            ))),
            _ => Ok(()),
        }
    }

    fn passes(&self, row: &[f64]) -> bool {
        match *self {
            QualityCriterion::Strict => row.iter().all(|&s| s < 0.0),
            QualityCriterion::Fraction(tau) => {
                let negative = row.iter().filter(|&&s| s < 0.0).count();
                negative as f64 >= tau * row.len() as f64 - 1e-9
            }
        }
    }
}

/// Row indices of candidates that pass `c`, in row order.
pub fn quality_filter_rows(m: &InfluenceMatrix, c: &QualityCriterion) -> Result<Vec<usize>> {
    c.validate()?;
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Input("influence matrix is empty".into()));
    }
    Ok((0..m.rows()).filter(|&r| c.passes(m.row(r))).collect())
}

/// Ids of candidates that pass `c`, in row order.
pub fn quality_filter(m: &InfluenceMatrix, c: &QualityCriterion) -> Result<Vec<String>> {
    Ok(quality_filter_rows(m, c)?
        .into_iter()
        .map(|r| m.candidate_ids[r].clone())
        .collect())
}

/// Cluster count used when the pool is too small for the 512-cluster default.
pub fn scaled_k_clusters(pool: usize) -> usize {
    DEFAULT_K_CLUSTERS.min(pool / 4).max(1)
}

pub fn scaled_proj_dim(feature_dim: usize) -> usize {
    DEFAULT_PROJ_DIM.min(feature_dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversified {
    /// Selected ids in draw order.
    pub ids: Vec<String>,
    /// Cluster of each selected id.
    pub clusters: Vec<usize>,
    /// Cluster of every pool member, in pool order.
    pub pool_clusters: Vec<usize>,
    pub take_counts: Vec<usize>,
    pub inertia: f64,
}

/// Projects `features` to `proj_dim`, clusters them into `k_clusters`, then
/// draws `n_select` members round-robin: clusters are visited cyclically in a
/// shuffled order, each visit taking one uniformly random unused member, with
/// exhausted clusters skipped.
pub fn diversify(
    features: &[FeatureVector],
    n_select: usize,
    k_clusters: usize,
    proj_dim: usize,
    rng: &Rng,
) -> Result<Diversified> {
    let n = features.len();
    if n_select > n {
        return Err(Error::Input(format!(
            "cannot select {n_select} from a pool of {n}"
        )));
    }
    if k_clusters == 0 || k_clusters > n {
        return Err(Error::Input(format!(
            "cannot form {k_clusters} clusters from a pool of {n}"
        )));
    }
    let dim = features[0].dim();
    if let Some(f) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::Shape(format!("feature `{}` has dim {}, expected {dim}", f.id, f.dim())));
    }
    let points = Matrix::new(
        n,
        dim,
        features.iter().flat_map(|f| f.to_f64()).collect(),
    )?;
    let proj = random_projection(dim, proj_dim, &mut rng.fork(1))?;
    let projected = project_rows(&points, &proj)?;
    let model = kmeans(&projected, k_clusters, &mut rng.fork(2), DEFAULT_KMEANS_ITERS)?;

    let mut sampler = rng.fork(3);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k_clusters];
    for (i, &c) in model.assignment.iter().enumerate() {
        members[c].push(i);
    }
    for m in &mut members {
        sampler.shuffle(m);
    }
    let order = sampler.permutation(k_clusters);

    let mut ids = Vec::with_capacity(n_select);
    let mut clusters = Vec::with_capacity(n_select);
    let mut take_counts = vec![0; k_clusters];
    while ids.len() < n_select {
        for &c in &order {
            if ids.len() == n_select {
                break;
            }
            if let Some(i) = members[c].pop() {
                ids.push(features[i].id.clone());
                clusters.push(c);
                take_counts[c] += 1;
            }
        }
    }
    Ok(Diversified {
        ids,
        clusters,
        pool_clusters: model.assignment.clone(),
        take_counts,
        inertia: model.inertia,
    })
}

/// Shannon entropy (bits) of a label multiset.
pub fn label_entropy(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let n = labels.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfigEcho {
    pub lambda: f64,
    pub quality: QualityCriterion,
    pub k_clusters: usize,
    pub proj_dim: usize,
    pub n_select: usize,
    pub seed_set_size: usize,
    pub rng_seed: u64,
}

/// Everything the two selection stages decided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub quality_pass_ids: Vec<String>,
    pub pool: Vec<PoolEntry>,
    pub selected_ids: Vec<String>,
    /// Cluster of each selected id.
    pub selected_clusters: Vec<usize>,
    pub take_counts: Vec<usize>,
    pub config: SelectionConfigEcho,
}
