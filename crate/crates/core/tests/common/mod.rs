//! Independent brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use normq::compression::{QuantizedHmm, QuantizedMatrix, WeightedValue};
use normq::decode::KeywordDfa;
use normq::{HmmModel, Matrix};

/// `P(x_1..x_T)` by summing over every hidden path.
pub fn path_sum(model: &HmmModel, tokens: &[u32]) -> f64 {
    let n = model.hidden_size();
    let t = tokens.len();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut p = model.initial()[path[0]] * model.emission()[(path[0], tokens[0] as usize)];
        for i in 1..t {
            p *= model.transition()[(path[i - 1], path[i])]
                * model.emission()[(path[i], tokens[i] as usize)];
        }
        total += p;
        if !increment(&mut path, n) {
            return total;
        }
    }
}

/// Posterior `P(z_t = i | x)` by path enumeration.
pub fn path_posteriors(model: &HmmModel, tokens: &[u32]) -> Vec<Vec<f64>> {
    let n = model.hidden_size();
    let t = tokens.len();
    let mut post = vec![vec![0.0; n]; t];
    let mut path = vec![0usize; t];
    let mut total = 0.0;
    loop {
        let mut p = model.initial()[path[0]] * model.emission()[(path[0], tokens[0] as usize)];
        for i in 1..t {
            p *= model.transition()[(path[i - 1], path[i])]
                * model.emission()[(path[i], tokens[i] as usize)];
        }
        total += p;
        for i in 0..t {
            post[i][path[i]] += p;
        }
        if !increment(&mut path, n) {
            break;
        }
    }
    for row in &mut post {
        row.iter_mut().for_each(|x| *x /= total);
    }
    post
}

/// Odometer increment over `base^len`; false once it wraps.
pub fn increment(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Every token sequence of length `len` over `vocab`.
pub fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    if len == 0 {
        return vec![Vec::new()];
    }
    let mut digits = vec![0usize; len];
    loop {
        out.push(digits.iter().map(|&d| d as u32).collect());
        if !increment(&mut digits, vocab) {
            return out;
        }
    }
}

pub fn contains_run(haystack: &[u32], needle: &[u32]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Probability that `steps` more tokens emitted from hidden state `z`
/// drive the DFA from `s` into an accepting state, by enumerating every
/// continuation and hidden path.
pub fn continuation_acceptance(
    model: &HmmModel,
    dfa: &KeywordDfa,
    steps: usize,
    z: usize,
    s: usize,
) -> f64 {
    if steps == 0 {
        return if dfa.is_accepting(s) { 1.0 } else { 0.0 };
    }
    let n = model.hidden_size();
    let mut total = 0.0;
    for xs in all_sequences(model.vocab_size(), steps) {
        if !dfa.is_accepting(xs.iter().fold(s, |q, &x| dfa.next(q, x))) {
            continue;
        }
        // Paths start at z; the state after the last emission is summed out.
        let mut tail = vec![0usize; steps - 1];
        loop {
            let mut prev = z;
            let mut p = model.emission()[(z, xs[0] as usize)];
            for (i, &h) in tail.iter().enumerate() {
                p *= model.transition()[(prev, h)] * model.emission()[(h, xs[i + 1] as usize)];
                prev = h;
            }
            total += p;
            if tail.is_empty() || !increment(&mut tail, n) {
                break;
            }
        }
    }
    total
}

/// Minimum weighted squared error over every split of the sorted points
/// into at most `k` contiguous groups.
pub fn contiguous_partition_optimum(points: &[WeightedValue], k: usize) -> f64 {
    let n = points.len();
    if n <= k {
        return 0.0;
    }
    let cost = |a: usize, b: usize| -> f64 {
        let w: f64 = points[a..b].iter().map(|p| p.weight).sum();
        let mean = points[a..b].iter().map(|p| p.weight * p.value).sum::<f64>() / w;
        points[a..b]
            .iter()
            .map(|p| p.weight * (p.value - mean).powi(2))
            .sum()
    };
    let mut best = f64::INFINITY;
    // Choose k−1 cut positions among 1..n.
    let mut cuts: Vec<usize> = (1..k).collect();
    loop {
        let mut bounds = vec![0];
        bounds.extend(&cuts);
        bounds.push(n);
        let d: f64 = bounds.windows(2).map(|w| cost(w[0], w[1])).sum();
        best = best.min(d);
        // Next combination of k−1 cuts from 1..n in lexicographic order.
        let m = cuts.len();
        let mut i = m;
        while i > 0 && cuts[i - 1] == n - m + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        cuts[i - 1] += 1;
        for j in i..m {
            cuts[j] = cuts[j - 1] + 1;
        }
    }
}

/// Byte count of a quantized model file, from the layout description.
pub fn analytic_file_size(q: &QuantizedHmm) -> u64 {
    fn matrix(m: &QuantizedMatrix) -> u64 {
        let b = m.bits() as u64;
        let mut size = 8 * (m.rows() as u64 + 1) + 8;
        for r in 0..m.rows() {
            let c = m.row_entries(r).0.len() as u64;
            size += 4 + 4 * c + (b * c).div_ceil(8);
        }
        if let Some(cb) = m.codebook() {
            size += 4 + 8 * cb.len() as u64;
        }
        size
    }
    28 + matrix(&q.initial) + matrix(&q.transition) + matrix(&q.emission)
}

/// A row-stochastic matrix with Dirichlet rows.
pub fn stochastic(rows: usize, cols: usize, concentration: f64, seed: u64) -> Matrix {
    let (_, _, emission) = HmmModel::random(rows, cols, concentration, seed).into_parts();
    emission
}
