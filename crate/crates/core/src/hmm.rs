//! Discrete HMM model, validation, scaled forward/backward and sampling.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// Which of the three parameter matrices a value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixName {
    Initial,
    Transition,
    Emission,
}

impl MatrixName {
    pub const ALL: [MatrixName; 3] = [Self::Initial, Self::Transition, Self::Emission];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Initial => "initial",
            Self::Transition => "transition",
            Self::Emission => "emission",
        }
    }
}

impl fmt::Display for MatrixName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Observed token IDs, length at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Domain("token sequence must be nonempty".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_token(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl TryFrom<Vec<u32>> for TokenSequence {
    type Error = Error;

    fn try_from(tokens: Vec<u32>) -> Result<Self> {
        Self::new(tokens)
    }
}

/// The HMM triple: initial distribution, transition and emission matrices.
///
/// Construction only checks shapes. Stochasticity is checked by
/// [`validate_model`], because pruned or quantized models are allowed to
/// break it and callers need to see how.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    initial: Vec<f64>,
    transition: Matrix,
    emission: Matrix,
}

impl HmmModel {
    pub fn new(initial: Vec<f64>, transition: Matrix, emission: Matrix) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(Error::Dimension("hidden size must be positive".into()));
        }
        if transition.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "transition is {}x{}, expected {n}x{n}",
                transition.rows(),
                transition.cols()
            )));
        }
        if emission.rows() != n || emission.cols() == 0 {
            return Err(Error::Dimension(format!(
                "emission is {}x{}, expected {n} rows and a positive vocabulary",
                emission.rows(),
                emission.cols()
            )));
        }
        Ok(Self {
            initial,
            transition,
            emission,
        })
    }

    /// Every distribution uniform.
    pub fn uniform(hidden_size: usize, vocab_size: usize) -> Self {
        let n = hidden_size as f64;
        Self::new(
            vec![1.0 / n; hidden_size],
            Matrix::filled(hidden_size, hidden_size, 1.0 / n),
            Matrix::filled(hidden_size, vocab_size, 1.0 / vocab_size as f64),
        )
        .expect("uniform shapes are consistent")
    }

    /// Rows drawn from a symmetric Dirichlet with the given concentration.
    pub fn random(hidden_size: usize, vocab_size: usize, concentration: f64, seed: u64) -> Self {
        assert!(hidden_size > 0 && vocab_size > 0);
        let mut rng = seed::rng(seed);
        let gamma = Gamma::new(concentration, 1.0).expect("concentration must be positive");
        let mut draw_row = |row: &mut [f64]| loop {
            for v in row.iter_mut() {
                *v = gamma.sample(&mut rng);
            }
            let s: f64 = row.iter().sum();
            if s > 0.0 && s.is_finite() {
                row.iter_mut().for_each(|v| *v /= s);
                break;
            }
        };
        let mut initial = vec![0.0; hidden_size];
        draw_row(&mut initial);
        let mut transition = Matrix::zeros(hidden_size, hidden_size);
        for i in 0..hidden_size {
            draw_row(transition.row_mut(i));
        }
        let mut emission = Matrix::zeros(hidden_size, vocab_size);
        for i in 0..hidden_size {
            draw_row(emission.row_mut(i));
        }
        Self::new(initial, transition, emission).expect("random shapes are consistent")
    }

    #[inline]
    pub fn hidden_size(&self) -> usize {
        self.initial.len()
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.emission.cols()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self) -> &Matrix {
        &self.transition
    }

    pub fn emission(&self) -> &Matrix {
        &self.emission
    }

    /// The initial distribution as a `1 x hidden_size` matrix.
    pub fn initial_matrix(&self) -> Matrix {
        Matrix::from_vec(1, self.hidden_size(), self.initial.clone()).expect("1xN")
    }

    pub fn matrix(&self, name: MatrixName) -> Matrix {
        match name {
            MatrixName::Initial => self.initial_matrix(),
            MatrixName::Transition => self.transition.clone(),
            MatrixName::Emission => self.emission.clone(),
        }
    }

    pub fn into_parts(self) -> (Vec<f64>, Matrix, Matrix) {
        (self.initial, self.transition, self.emission)
    }

    /// Builds a model from three matrices, the first being `1 x N`.
    pub fn from_matrices(initial: Matrix, transition: Matrix, emission: Matrix) -> Result<Self> {
        if initial.rows() != 1 {
            return Err(Error::Dimension(format!(
                "initial must have one row, found {}",
                initial.rows()
            )));
        }
        Self::new(initial.into_vec(), transition, emission)
    }

    /// Applies `f` to each of the three matrices (initial as `1 x N`).
    pub fn try_map_matrices<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(MatrixName, &Matrix) -> Result<Matrix>,
    {
        let initial = f(MatrixName::Initial, &self.initial_matrix())?;
        let transition = f(MatrixName::Transition, &self.transition)?;
        let emission = f(MatrixName::Emission, &self.emission)?;
        Self::from_matrices(initial, transition, emission)
    }

    /// Relabels hidden states: old state `i` becomes `perm[i]`.
    pub fn permute_states(&self, perm: &[usize]) -> Self {
        let n = self.hidden_size();
        assert_eq!(perm.len(), n);
        let mut initial = vec![0.0; n];
        for (i, &p) in perm.iter().enumerate() {
            initial[p] = self.initial[i];
        }
        let vocab: Vec<usize> = (0..self.vocab_size()).collect();
        Self {
            initial,
            transition: self.transition.permuted(perm, perm),
            emission: self.emission.permuted(perm, &vocab),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Domain("token sequence must be nonempty".into()));
        }
        let v = self.vocab_size();
        if let Some((t, &x)) = tokens.iter().enumerate().find(|(_, &x)| x as usize >= v) {
            return Err(Error::Domain(format!(
                "token {x} at position {t} outside vocabulary of size {v}"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    AllZeroRow,
    RowSum { sum: f64, deviation: f64 },
    OutOfRange { col: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub matrix: MatrixName,
    pub row: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::AllZeroRow => {
                write!(f, "all-zero row, {} row {}", self.matrix, self.row)
            }
            ViolationKind::RowSum { sum, deviation } => write!(
                f,
                "row sum {sum} exceeds tolerance ({} row {}, deviation {deviation:e})",
                self.matrix, self.row
            ),
            ViolationKind::OutOfRange { col, value } => write!(
                f,
                "entry {value} outside [0, 1] ({} row {}, column {col})",
                self.matrix, self.row
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_all_zero_row(&self) -> bool {
        self.violations
            .iter()
            .any(|v| v.kind == ViolationKind::AllZeroRow)
    }
}

/// Reports every broken invariant; never fails.
pub fn validate_model(model: &HmmModel, tolerance: f64) -> ValidationReport {
    let mut violations = Vec::new();
    let mut check_row = |matrix: MatrixName, row: usize, values: &[f64]| {
        for (col, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                violations.push(Violation {
                    matrix,
                    row,
                    kind: ViolationKind::OutOfRange { col, value },
                });
            }
        }
        if values.iter().all(|&v| v == 0.0) {
            violations.push(Violation {
                matrix,
                row,
                kind: ViolationKind::AllZeroRow,
            });
            return;
        }
        let sum: f64 = values.iter().sum();
        let deviation = (sum - 1.0).abs();
        if !(deviation <= tolerance) {
            violations.push(Violation {
                matrix,
                row,
                kind: ViolationKind::RowSum { sum, deviation },
            });
        }
    };
    check_row(MatrixName::Initial, 0, model.initial());
    for (i, row) in model.transition().iter_rows().enumerate() {
        check_row(MatrixName::Transition, i, row);
    }
    for (i, row) in model.emission().iter_rows().enumerate() {
        check_row(MatrixName::Emission, i, row);
    }
    ValidationReport { violations }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Normalized forward messages and per-step scale factors.
struct ForwardPass {
    /// `T x N`, row `t` is `P(z_t | x_{0..=t})`.
    alpha: Vec<f64>,
    /// `c_t = P(x_t | x_{0..t})`.
    scales: Vec<f64>,
}

impl ForwardPass {
    fn log_likelihood(&self) -> f64 {
        self.scales.iter().map(|c| c.ln()).sum()
    }
}

/// Runs the scaled forward recursion. Returns `None` when some prefix has
/// probability zero.
fn forward_pass(model: &HmmModel, tokens: &[u32]) -> Option<ForwardPass> {
    let n = model.hidden_size();
    let big_t = tokens.len();
    let trans = model.transition();
    let emis = model.emission();
    let mut alpha = vec![0.0; big_t * n];
    let mut scales = vec![0.0; big_t];

    let x0 = tokens[0] as usize;
    for i in 0..n {
        alpha[i] = model.initial()[i] * emis[(i, x0)];
    }
    for t in 0..big_t {
        if t > 0 {
            let (prev, cur) = alpha.split_at_mut(t * n);
            let prev = &prev[(t - 1) * n..];
            let cur = &mut cur[..n];
            for (i, &a) in prev.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (c, &p) in cur.iter_mut().zip(trans.row(i)) {
                    *c += a * p;
                }
            }
            let x = tokens[t] as usize;
            for (j, c) in cur.iter_mut().enumerate() {
                *c *= emis[(j, x)];
            }
        }
        let row = &mut alpha[t * n..(t + 1) * n];
        let c: f64 = row.iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return None;
        }
        row.iter_mut().for_each(|v| *v /= c);
        scales[t] = c;
    }
    Some(ForwardPass { alpha, scales })
}

/// `log P(x_1..x_T)` by the scaled forward recursion.
///
/// A sequence with probability zero yields `f64::NEG_INFINITY`; callers
/// count these separately rather than treating them as failures.
pub fn forward_loglik(model: &HmmModel, seq: &TokenSequence) -> Result<f64> {
    forward_loglik_tokens(model, seq.tokens())
}

pub fn forward_loglik_tokens(model: &HmmModel, tokens: &[u32]) -> Result<f64> {
    model.check_tokens(tokens)?;
    Ok(forward_pass(model, tokens).map_or(f64::NEG_INFINITY, |p| p.log_likelihood()))
}

/// Expected sufficient statistics, accumulated over any number of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    pub initial: Vec<f64>,
    /// `Σ_t P(z_t = i, z_{t+1} = j | x)`.
    pub transition: Matrix,
    /// `Σ_t P(z_t = i | x) [x_t = k]`.
    pub emission: Matrix,
}

impl ExpectedCounts {
    pub fn zeros(hidden_size: usize, vocab_size: usize) -> Self {
        Self {
            initial: vec![0.0; hidden_size],
            transition: Matrix::zeros(hidden_size, hidden_size),
            emission: Matrix::zeros(hidden_size, vocab_size),
        }
    }

    pub fn add(&mut self, other: &ExpectedCounts) {
        for (a, b) in self.initial.iter_mut().zip(&other.initial) {
            *a += b;
        }
        for (a, b) in self
            .transition
            .as_mut_slice()
            .iter_mut()
            .zip(other.transition.as_slice())
        {
            *a += b;
        }
        for (a, b) in self
            .emission
            .as_mut_slice()
            .iter_mut()
            .zip(other.emission.as_slice())
        {
            *a += b;
        }
    }
}

/// Posterior quantities for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackwardStats {
    pub log_likelihood: f64,
    /// `T x N`, row `t` is `P(z_t | x_1..x_T)`.
    pub state_posteriors: Matrix,
    /// `N x N`, summed over `t`.
    pub pair_posteriors: Matrix,
    /// `N x V`.
    pub emission_counts: Matrix,
}

/// Runs forward/backward and adds this sequence's expected counts into
/// `acc`. When `posteriors` is given it receives the `T x N` state
/// posteriors. Returns the log-likelihood.
pub fn accumulate_counts(
    model: &HmmModel,
    tokens: &[u32],
    acc: &mut ExpectedCounts,
    mut posteriors: Option<&mut Matrix>,
) -> Result<f64> {
    model.check_tokens(tokens)?;
    let fwd = forward_pass(model, tokens).ok_or(Error::ImpossibleSequence)?;
    let n = model.hidden_size();
    let big_t = tokens.len();
    let trans = model.transition();
    let emis = model.emission();

    // Scaled backward messages: b_t(i) = P(x_{t+1..T} | z_t = i) / Π_{s>t} c_s.
    let mut next_b = vec![1.0; n];
    let mut cur_b = vec![0.0; n];
    let mut weighted = vec![0.0; n];
    let mut post = vec![0.0; n];

    for t in (0..big_t).rev() {
        let a_t = &fwd.alpha[t * n..(t + 1) * n];
        // state posterior at t uses b_t, which is next_b when t = T-1
        // and has been computed into next_b at the end of the previous loop.
        let mut s = 0.0;
        for i in 0..n {
            post[i] = a_t[i] * next_b[i];
            s += post[i];
        }
        // exact renormalization kills rounding drift
        if s > 0.0 {
            post.iter_mut().for_each(|p| *p /= s);
        }
        let x = tokens[t] as usize;
        for i in 0..n {
            acc.emission[(i, x)] += post[i];
        }
        if let Some(m) = posteriors.as_deref_mut() {
            m.row_mut(t).copy_from_slice(&post);
        }
        if t == 0 {
            for i in 0..n {
                acc.initial[i] += post[i];
            }
            break;
        }
        // move to t-1: weighted(j) = β_j(x_t) b_t(j) / c_t
        let c = fwd.scales[t];
        for j in 0..n {
            weighted[j] = emis[(j, x)] * next_b[j] / c;
        }
        let a_prev = &fwd.alpha[(t - 1) * n..t * n];
        for i in 0..n {
            let row = trans.row(i);
            let mut b = 0.0;
            let counts = acc.transition.row_mut(i);
            let ai = a_prev[i];
            for j in 0..n {
                let w = row[j] * weighted[j];
                b += w;
                counts[j] += ai * w;
            }
            cur_b[i] = b;
        }
        std::mem::swap(&mut next_b, &mut cur_b);
    }
    Ok(fwd.log_likelihood())
}

/// Full posterior statistics for one sequence.
pub fn forward_backward(model: &HmmModel, seq: &TokenSequence) -> Result<ForwardBackwardStats> {
    let mut acc = ExpectedCounts::zeros(model.hidden_size(), model.vocab_size());
    let mut posts = Matrix::zeros(seq.len(), model.hidden_size());
    let log_likelihood = accumulate_counts(model, seq.tokens(), &mut acc, Some(&mut posts))?;
    Ok(ForwardBackwardStats {
        log_likelihood,
        state_posteriors: posts,
        pair_posteriors: acc.transition,
        emission_counts: acc.emission,
    })
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Draws an index from a nonnegative weight row; `u` is uniform in `[0, 1)`.
/// Falls back to the last positive entry when rounding leaves `u` past the
/// cumulative total.
pub(crate) fn categorical(weights: &[f64], total: f64, u: f64) -> Option<usize> {
    if !(total > 0.0) {
        return None;
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last
}

pub(crate) fn draw<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    categorical(weights, total, rng.random::<f64>()).expect("row has positive mass")
}

/// Ancestral sampling: `z_0 ~ initial`, `x_t ~ emission[z_t]`,
/// `z_{t+1} ~ transition[z_t]`.
pub fn sample_sequence(model: &HmmModel, length: usize, seed: u64) -> TokenSequence {
    assert!(length > 0, "sequence length must be positive");
    let mut rng = seed::rng(seed);
    let mut tokens = Vec::with_capacity(length);
    let mut z = draw(&mut rng, model.initial());
    for t in 0..length {
        tokens.push(draw(&mut rng, model.emission().row(z)) as u32);
        if t + 1 < length {
            z = draw(&mut rng, model.transition().row(z));
        }
    }
    TokenSequence(tokens)
}

/// `count` sequences, each with its own derived seed.
pub fn sample_sequences(
    model: &HmmModel,
    count: usize,
    length: usize,
    seed: u64,
) -> Vec<TokenSequence> {
    crate::par::map_range(count, |i| {
        sample_sequence(model, length, seed::derive_indexed(seed, i as u64))
    })
}
