use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::rng::SeededRng;

pub const MAX_ITERS: usize = 50;
pub const TOLERANCE: f64 = 1e-6;
/// Training points kept per centroid.
pub const SAMPLE_PER_CENTROID: usize = 256;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(x: &[f64], centroids: &[f64], dims: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.chunks_exact(dims).enumerate() {
        let d = sq_dist(x, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding over row-major `points`.
/// Returns `k × dims` centroids.
pub fn train(points: &[f64], dims: usize, k: usize, rng: &mut SeededRng) -> Vec<f64> {
    let n = points.len() / dims;
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= n");
    let row = |i: usize| &points[i * dims..(i + 1) * dims];

    // Subsample large inputs.
    let cap = SAMPLE_PER_CENTROID * k;
    let chosen: Vec<usize> = if n > cap {
        let mut idx = sample(rng, n, cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let m = chosen.len();

    let mut centroids = Vec::with_capacity(k * dims);
    let first = chosen[rng.random_range(0..m)];
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = chosen
        .iter()
        .map(|&i| sq_dist(row(i), row(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (j, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = j;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..m)
        };
        let c = row(chosen[pick]).to_vec();
        for (j, &i) in chosen.iter().enumerate() {
            d2[j] = d2[j].min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    for _ in 0..MAX_ITERS {
        let assign: Vec<usize> = chosen
            .par_iter()
            .map(|&i| nearest(row(i), &centroids, dims))
            .collect();
        let mut sums = vec![0.0; k * dims];
        let mut counts = vec![0usize; k];
        for (&i, &c) in chosen.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c * dims..(c + 1) * dims].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster keeps its previous position.
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let old = &mut centroids[c * dims..(c + 1) * dims];
            let mut shift = 0.0;
            for (o, s) in old.iter_mut().zip(&sums[c * dims..(c + 1) * dims]) {
                let v = s * inv;
                shift += (v - *o) * (v - *o);
                *o = v;
            }
            movement = movement.max(shift.sqrt());
        }
        if movement < TOLERANCE {
            break;
        }
    }
    centroids
}
