//! Weighted one-dimensional K-means.
//!
//! Matrix values are collapsed into a sorted list of distinct values with
//! multiplicities. In one dimension every optimal cluster is a contiguous
//! run of that list, which lets [`optimal_centroids`] find the global
//! optimum by dynamic programming; [`lloyd_1d`] then refines from it.

use rand::Rng;

use crate::error::Result;
use crate::matrix::Matrix;

use super::{check_bits, QuantizedMatrix, Scheme, DEFAULT_EPSILON};

/// Work bound (`k · n · log2 n`) above which initialization falls back to
/// weighted quantiles instead of the exact dynamic program.
const OPTIMAL_INIT_BUDGET: f64 = 5.0e7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedValue {
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// Sorted ascending.
    pub centroids: Vec<f64>,
    pub distortion: f64,
    pub iterations: usize,
    /// Distortion after each assignment step.
    pub trace: Vec<f64>,
}

/// Sorted distinct values with their counts.
pub fn weighted_values(values: &[f64]) -> Vec<WeightedValue> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<WeightedValue> = Vec::new();
    for v in sorted {
        match out.last_mut() {
            Some(last) if last.value == v => last.weight += 1.0,
            _ => out.push(WeightedValue {
                value: v,
                weight: 1.0,
            }),
        }
    }
    out
}

/// Index of the nearest centroid; ties go to the lower index.
#[inline]
fn nearest(centroids: &[f64], v: f64) -> usize {
    let i = centroids.partition_point(|&c| c < v);
    if i == 0 {
        0
    } else if i == centroids.len() || v - centroids[i - 1] <= centroids[i] - v {
        i - 1
    } else {
        i
    }
}

fn distortion(points: &[WeightedValue], centroids: &[f64], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| {
            let d = p.value - centroids[a];
            p.weight * d * d
        })
        .sum()
}

/// Lloyd iteration from the given initial centroids. Empty clusters are
/// re-seeded at a point drawn with probability proportional to its weighted
/// squared error.
pub fn lloyd_1d(
    points: &[WeightedValue],
    init: Vec<f64>,
    max_iters: usize,
    seed: u64,
) -> KMeansFit {
    let mut centroids = init;
    centroids.sort_by(f64::total_cmp);
    let k = centroids.len();
    let mut rng = crate::seed::rng(seed);
    let mut assign: Vec<usize> = points
        .iter()
        .map(|p| nearest(&centroids, p.value))
        .collect();
    let mut trace = vec![distortion(points, &centroids, &assign)];
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let mut sum_w = vec![0.0; k];
        let mut sum_wv = vec![0.0; k];
        for (p, &a) in points.iter().zip(&assign) {
            sum_w[a] += p.weight;
            sum_wv[a] += p.weight * p.value;
        }
        for c in 0..k {
            if sum_w[c] > 0.0 {
                centroids[c] = sum_wv[c] / sum_w[c];
            }
        }
        for c in 0..k {
            if sum_w[c] > 0.0 {
                continue;
            }
            let errs: Vec<f64> = points
                .iter()
                .zip(&assign)
                .map(|(p, &a)| {
                    let d = p.value - centroids[a];
                    p.weight * d * d
                })
                .collect();
            let total: f64 = errs.iter().sum();
            if total > 0.0 {
                let pick = crate::hmm::categorical(&errs, total, rng.random::<f64>())
                    .expect("positive total");
                centroids[c] = points[pick].value;
            }
        }
        centroids.sort_by(f64::total_cmp);
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest(&centroids, p.value))
            .collect();
        let stable = next == assign;
        assign = next;
        trace.push(distortion(points, &centroids, &assign));
        if stable {
            break;
        }
    }

    // drop centroids nobody uses so the codebook stays minimal
    let mut used = vec![false; k];
    for &a in &assign {
        used[a] = true;
    }
    let centroids: Vec<f64> = centroids
        .into_iter()
        .zip(used)
        .filter_map(|(c, u)| u.then_some(c))
        .collect();
    KMeansFit {
        distortion: *trace.last().unwrap(),
        centroids,
        iterations,
        trace,
    }
}

/// Centroids at the `(i + 1/2) / k` quantiles of the weighted distribution,
/// topped up with unused distinct values when quantiles coincide. Returns at
/// most `points.len()` centroids.
pub fn quantile_centroids(points: &[WeightedValue], k: usize) -> Vec<f64> {
    let k = k.min(points.len());
    let total: f64 = points.iter().map(|p| p.weight).sum();
    let mut chosen = Vec::with_capacity(k);
    let mut idx = 0;
    let mut acc = points[0].weight;
    for i in 0..k {
        let target = (i as f64 + 0.5) / k as f64 * total;
        while acc < target && idx + 1 < points.len() {
            idx += 1;
            acc += points[idx].weight;
        }
        if chosen.last() != Some(&idx) {
            chosen.push(idx);
        }
    }
    if chosen.len() < k {
        let missing = k - chosen.len();
        let free: Vec<usize> = (0..points.len())
            .filter(|i| chosen.binary_search(i).is_err())
            .collect();
        let step = free.len() as f64 / missing as f64;
        chosen.extend((0..missing).map(|m| free[(m as f64 * step) as usize]));
        chosen.sort_unstable();
    }
    chosen.into_iter().map(|i| points[i].value).collect()
}

/// Globally optimal centroids for `k` clusters by dynamic programming over
/// contiguous runs, using divide and conquer on the monotone split points.
pub fn optimal_centroids(points: &[WeightedValue], k: usize) -> Vec<f64> {
    let n = points.len();
    let k = k.min(n).max(1);
    let mut w = vec![0.0; n + 1];
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, p) in points.iter().enumerate() {
        w[i + 1] = w[i] + p.weight;
        s1[i + 1] = s1[i] + p.weight * p.value;
        s2[i + 1] = s2[i] + p.weight * p.value * p.value;
    }
    // cost of the run [a, b)
    let cost = |a: usize, b: usize| -> f64 {
        let ww = w[b] - w[a];
        if ww <= 0.0 {
            return 0.0;
        }
        let m = s1[b] - s1[a];
        ((s2[b] - s2[a]) - m * m / ww).max(0.0)
    };

    // prev[i]: best cost of covering the first i points with m clusters
    let mut prev: Vec<f64> = (0..=n).map(|i| cost(0, i)).collect();
    let mut splits: Vec<Vec<usize>> = Vec::with_capacity(k);
    splits.push(vec![0; n + 1]);
    for m in 2..=k {
        let mut cur = vec![f64::INFINITY; n + 1];
        let mut arg = vec![0usize; n + 1];
        // cur[i] = min_{j in [m-1, i-1]} prev[j] + cost(j, i), for i >= m
        let mut stack = vec![(m, n, m - 1, n - 1)];
        while let Some((lo, hi, olo, ohi)) = stack.pop() {
            if lo > hi {
                continue;
            }
            let mid = (lo + hi) / 2;
            let mut best = f64::INFINITY;
            let mut best_j = olo;
            for j in olo..=ohi.min(mid - 1) {
                let c = prev[j] + cost(j, mid);
                if c < best {
                    best = c;
                    best_j = j;
                }
            }
            cur[mid] = best;
            arg[mid] = best_j;
            if mid > lo {
                stack.push((lo, mid - 1, olo, best_j));
            }
            stack.push((mid + 1, hi, best_j, ohi));
        }
        prev = cur;
        splits.push(arg);
    }

    let mut bounds = vec![n];
    let mut i = n;
    for m in (1..k).rev() {
        i = splits[m][i];
        bounds.push(i);
    }
    bounds.push(0);
    bounds.reverse();
    bounds
        .windows(2)
        .map(|r| (s1[r[1]] - s1[r[0]]) / (w[r[1]] - w[r[0]]))
        .collect()
}

/// Weighted 1-D K-means with `k` centroids. When there are no more distinct
/// values than centroids the codebook is the distinct values themselves.
pub fn kmeans_1d(points: &[WeightedValue], k: usize, max_iters: usize, seed: u64) -> KMeansFit {
    assert!(!points.is_empty() && k > 0);
    if points.len() <= k {
        let centroids: Vec<f64> = points.iter().map(|p| p.value).collect();
        return KMeansFit {
            centroids,
            distortion: 0.0,
            iterations: 0,
            trace: vec![0.0],
        };
    }
    let n = points.len() as f64;
    let init = if k as f64 * n * n.log2().max(1.0) <= OPTIMAL_INIT_BUDGET {
        optimal_centroids(points, k)
    } else {
        quantile_centroids(points, k)
    };
    lloyd_1d(points, init, max_iters, seed)
}

/// Clusters every matrix entry into at most `2^b` centroids. Entries whose
/// centroid is exactly zero are omitted from storage.
pub fn kmeans_quantize(
    matrix: &Matrix,
    bits: u8,
    max_iters: usize,
    seed: u64,
) -> Result<QuantizedMatrix> {
    check_bits(bits)?;
    if let Some(v) = matrix
        .as_slice()
        .iter()
        .find(|v| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(crate::Error::Domain(format!("cannot cluster entry {v}")));
    }
    let points = weighted_values(matrix.as_slice());
    let fit = kmeans_1d(&points, 1usize << bits, max_iters, seed);
    let codebook = fit.centroids;
    let cb = &codebook;
    let q =
        QuantizedMatrix::from_levels(matrix, bits, Scheme::KMeans, DEFAULT_EPSILON, None, |v| {
            let c = nearest(cb, v);
            (cb[c] != 0.0).then_some(c as u32)
        });
    Ok(QuantizedMatrix {
        codebook: Some(codebook),
        ..q
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pts(v: &[(f64, f64)]) -> Vec<WeightedValue> {
        v.iter()
            .map(|&(value, weight)| WeightedValue { value, weight })
            .collect()
    }

    #[test]
    fn two_point_masses_are_exact() {
        let mut vals = vec![0.1; 20];
        vals.extend(vec![0.9; 20]);
        vals.push(0.1);
        let fit = kmeans_1d(&weighted_values(&vals), 2, 50, 0);
        assert_eq!(fit.centroids, vec![0.1, 0.9]);
        assert_eq!(fit.distortion, 0.0);
    }

    #[test]
    fn one_centroid_is_weighted_mean() {
        let p = pts(&[(0.0, 3.0), (0.5, 1.0), (1.0, 2.0)]);
        let fit = kmeans_1d(&p, 1, 50, 0);
        assert_relative_eq!(fit.centroids[0], 2.5 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn optimal_dp_beats_or_matches_lloyd_from_quantiles() {
        let p = pts(&[
            (0.0, 50.0),
            (0.01, 3.0),
            (0.2, 1.0),
            (0.21, 1.0),
            (0.5, 2.0),
            (0.8, 1.0),
            (0.99, 4.0),
        ]);
        for k in 1..=6 {
            let opt = lloyd_1d(&p, optimal_centroids(&p, k), 100, 0);
            let q = lloyd_1d(&p, quantile_centroids(&p, k), 100, 0);
            assert!(opt.distortion <= q.distortion + 1e-15, "k={k}");
        }
    }

    #[test]
    fn quantile_init_has_k_distinct_centroids() {
        let mut v = vec![0.0; 1000];
        v.extend((1..=50).map(|i| i as f64 / 50.0));
        let p = weighted_values(&v);
        let c = quantile_centroids(&p, 16);
        assert_eq!(c.len(), 16);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn lloyd_distortion_never_increases() {
        let v: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let p = weighted_values(&v);
        let fit = lloyd_1d(&p, vec![0.0, 0.01, 0.02, 0.03], 100, 3);
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn quantize_omits_zero_centroid() {
        let m = Matrix::from_rows(&[[0.0, 0.0, 0.5, 0.5], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let q = kmeans_quantize(&m, 2, 20, 0).unwrap();
        assert_eq!(q.codebook().unwrap(), &[0.0, 0.5, 1.0]);
        assert_eq!(q.nnz(), 3);
        assert_eq!(q.dequantize(), m);
    }
}
