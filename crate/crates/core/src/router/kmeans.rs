//! Lloyd's k-means with k-means++ seeding and best-of-n restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GagError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Unit-norm centroids, one per cluster.
    pub centroids: Vec<Vec<f32>>,
    /// Within-cluster sum of squares of the winning restart, measured against
    /// the raw (pre-normalization) Lloyd means.
    pub sse: f64,
    /// SSE after every Lloyd iteration of the winning restart.
    pub sse_history: Vec<f64>,
    pub assignments: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass is on existing centroids; take the first unused point
            (0..points.len())
                .find(|&i| !centroids.iter().any(|c| c == &points[i]))
                .unwrap_or(0)
        } else {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

struct Run {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    sse: f64,
    history: Vec<f64>,
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> Run {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![0; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if c != assignments[i] {
                changed = true;
            }
            assignments[i] = c;
            dists[i] = d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the point farthest from its current centroid
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[assignments[i]] -= 1;
                    for (s, &v) in sums[assignments[i]].iter_mut().zip(&points[i]) {
                        *s -= v;
                    }
                    assignments[i] = c;
                    dists[i] = 0.0;
                    counts[c] = 1;
                    sums[c] = points[i].clone();
                    changed = true;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let sse = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        history.push(sse);
        if !changed && history.len() > 1 {
            break;
        }
    }
    Run {
        centroids,
        assignments,
        sse: *history.last().unwrap_or(&0.0),
        history,
    }
}

/// Clusters `points` and returns unit-norm centroids.
pub fn kmeans(points: &[Vec<f32>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.clusters == 0 {
        return Err(GagError::Config("k-means needs at least one cluster".into()));
    }
    if points.len() < cfg.clusters {
        return Err(GagError::InsufficientData {
            points: points.len(),
            clusters: cfg.clusters,
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(GagError::Dimension("points of unequal dimension".into()));
    }
    let pts: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Run> = None;
    for _ in 0..cfg.n_init.max(1) {
        let init = plus_plus_seed(&pts, cfg.clusters, &mut rng);
        let run = lloyd(&pts, init, cfg.max_iter);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let centroids = best
        .centroids
        .iter()
        .map(|c| {
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                c.iter().map(|v| (v / n) as f32).collect()
            } else {
                c.iter().map(|&v| v as f32).collect()
            }
        })
        .collect();
    Ok(KMeansResult {
        centroids,
        sse: best.sse,
        sse_history: best.history,
        assignments: best.assignments,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn cfg(c: usize) -> KMeansConfig {
        KMeansConfig {
            clusters: c,
            n_init: 10,
            max_iter: 100,
            seed: 7,
        }
    }

    fn unit(theta: f64) -> Vec<f32> {
        vec![theta.cos() as f32, theta.sin() as f32]
    }

    #[test]
    fn two_points_two_clusters_are_exact() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = kmeans(&pts, &cfg(2)).unwrap();
        let mut c = r.centroids.clone();
        c.sort_by(|a, b| b[0].total_cmp(&a[0]));
        assert_eq!(c, pts);
        assert_eq!(r.sse, 0.0);
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let pts = vec![unit(0.1), unit(0.5), unit(0.3)];
        let r = kmeans(&pts, &cfg(1)).unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|j| pts.iter().map(|p| p[j] as f64).sum::<f64>() / 3.0)
            .collect();
        let n = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        assert!((r.centroids[0][0] as f64 - mean[0] / n).abs() < 1e-6);
        assert!((r.centroids[0][1] as f64 - mean[1] / n).abs() < 1e-6);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = vec![unit(0.0)];
        assert!(matches!(
            kmeans(&pts, &cfg(2)),
            Err(GagError::InsufficientData { points: 1, clusters: 2 })
        ));
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = vec![unit(0.0), unit(0.0), unit(0.0), unit(PI)];
        let r = kmeans(&pts, &cfg(3)).unwrap();
        assert_eq!(r.centroids.len(), 3);
        let mut used = r.assignments.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 3);
    }

    #[test]
    fn matches_full_enumeration_on_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f32>> = (0..12)
            .map(|_| {
                let v: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let sse_of = |mask: u32| -> f64 {
            let mut total = 0.0;
            for side in [0, 1] {
                let members: Vec<&Vec<f32>> = pts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| ((mask >> i) & 1) as usize == side)
                    .map(|(_, p)| p)
                    .collect();
                if members.is_empty() {
                    return f64::INFINITY;
                }
                let mean: Vec<f64> = (0..3)
                    .map(|j| members.iter().map(|p| p[j] as f64).sum::<f64>() / members.len() as f64)
                    .collect();
                total += members
                    .iter()
                    .map(|p| (0..3).map(|j| (p[j] as f64 - mean[j]).powi(2)).sum::<f64>())
                    .sum::<f64>();
            }
            total
        };
        let best = (0..(1u32 << 11)).map(sse_of).fold(f64::INFINITY, f64::min);
        let r = kmeans(&pts, &cfg(2)).unwrap();
        assert!((r.sse - best).abs() < 1e-9, "{} vs {}", r.sse, best);
    }
}
