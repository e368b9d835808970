use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{sqdist, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `k × d`, row-major.
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    /// Lloyd iterations (centroid updates) performed.
    pub iterations: usize,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sqdist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then each next centre drawn with
/// probability proportional to squared distance from the nearest chosen centre.
fn plus_plus(points: &Matrix, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    chosen[first] = true;
    let mut centroids = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sqdist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every remaining point coincides with a centre
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.below(free.len())]
        };
        chosen[next] = true;
        let c = points.row(next).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sqdist(points.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ initialization.
///
/// Stops when an assignment step changes nothing or after `max_iter` centroid
/// updates. A cluster left empty by an update is re-seeded at the point
/// farthest from its own centroid.
pub fn kmeans(points: &Matrix, k: usize, rng: &mut Rng, max_iter: usize) -> Result<ClusterModel> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Input(format!("cannot form {k} clusters from {n} points")));
    }
    if points.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite point coordinates".into()));
    }
    let d = points.cols();
    let mut centroids = plus_plus(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let nearest_all: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(points.row(i), &centroids))
            .collect();
        let changed = nearest_all
            .iter()
            .zip(&assignment)
            .any(|((c, _), &old)| *c != old);
        for (slot, (c, _)) in assignment.iter_mut().zip(&nearest_all) {
            *slot = *c;
        }
        let dists: Vec<f64> = nearest_all.iter().map(|(_, d)| *d).collect();
        history.push(dists.iter().sum());
        if !changed || iterations >= max_iter {
            break;
        }

        // update step, summed in point order
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s * inv).collect();
            }
        }
        let mut far: Vec<f64> = (0..n)
            .map(|i| sqdist(points.row(i), &centroids[assignment[i]]))
            .collect();
        for c in 0..k {
            if counts[c] == 0 {
                let (idx, _) = far
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
                centroids[c] = points.row(idx).to_vec();
                far[idx] = 0.0;
            }
        }
        iterations += 1;
    }

    let inertia = *history.last().expect("at least one assignment step");
    Ok(ClusterModel {
        centroids,
        assignment,
        inertia,
        iterations,
        inertia_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let m = kmeans(&pts, 1, &mut Rng::seeded(0), 50).unwrap();
        assert_eq!(m.assignment, vec![0, 0, 0]);
        assert!((m.centroids[0][0] - 1.0).abs() < 1e-15);
        assert!((m.centroids[0][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = Matrix::from_fn(6, 3, |i, j| (i * 7 + j * j) as f64);
        let m = kmeans(&pts, 6, &mut Rng::seeded(1), 50).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut seen = m.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let pts = Matrix::zeros(3, 2);
        assert!(matches!(kmeans(&pts, 4, &mut Rng::seeded(0), 10), Err(Error::Input(_))));
    }

    #[test]
    fn duplicate_points_still_give_k_centroids() {
        let pts = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![5.0]]).unwrap();
        let m = kmeans(&pts, 3, &mut Rng::seeded(2), 20).unwrap();
        assert_eq!(m.k(), 3);
        assert_eq!(m.inertia, 0.0);
    }
}
