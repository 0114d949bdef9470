//! Reference detector: k-means over pairwise ray intersections with a fixed
//! cluster count. Each centroid is scored by its member count relative to
//! the largest cluster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{for_each_intersection, EmConfig};
use crate::domain::{SceneBatch, Vec2};
use crate::eval::Prediction;

const MAX_LLOYD_ITERS: usize = 100;

/// k-means++ seeding followed by Lloyd iterations until assignments settle.
/// Returns `(centroid, member count)` for non-empty clusters.
pub fn kmeans(points: &[Vec2], k: usize, seed: u64) -> Vec<(Vec2, usize)> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut nearest: Vec<f64> = points.iter().map(|p| (p - centers[0]).norm_squared()).collect();
    while centers.len() < k.min(points.len()) {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = points.len() - 1;
        for (i, d) in nearest.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = points[pick];
        centers.push(c);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min((p - c).norm_squared());
        }
    }

    let mut label = vec![usize::MAX; points.len()];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (l, p) in label.iter_mut().zip(points) {
            let best = centers
                .iter()
                .enumerate()
                .map(|(c, q)| (c, (p - q).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .expect("at least one center");
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        let mut sums = vec![(Vec2::zeros(), 0usize); centers.len()];
        for (&l, p) in label.iter().zip(points) {
            sums[l].0 += p;
            sums[l].1 += 1;
        }
        for (c, (s, n)) in centers.iter_mut().zip(&sums) {
            if *n > 0 {
                *c = s / *n as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; centers.len()];
    for &l in &label {
        counts[l] += 1;
    }
    centers
        .into_iter()
        .zip(counts)
        .filter(|(_, n)| *n > 0)
        .collect()
}

/// Fixed-`k` intersection clustering over the same candidate intersections
/// the EM driver seeds from.
pub fn intersection_kmeans(batch: &SceneBatch, cfg: &EmConfig, k: usize, seed: u64) -> Vec<Prediction> {
    let mut points = Vec::new();
    for_each_intersection(batch, cfg, |p| points.push(p));
    let clusters = kmeans(&points, k, seed);
    let largest = clusters.iter().map(|c| c.1).max().unwrap_or(1) as f64;
    clusters
        .into_iter()
        .map(|(position, n)| Prediction {
            position,
            score: n as f64 / largest,
        })
        .collect()
}
