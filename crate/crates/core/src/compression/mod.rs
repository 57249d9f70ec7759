//! Compression schemes for probability matrices.
//!
//! Quantized matrices are stored sparsely: each row keeps only the entries
//! whose level is nonzero. How a row is reconstructed depends on the scheme:
//!
//! | scheme        | stored level `k`          | reconstruction                                  |
//! |---------------|---------------------------|-------------------------------------------------|
//! | `LinearFixed` | `round(p·(2^b−1))`        | `k / 2^b`                                        |
//! | `NormQ`       | `round(p·(2^b−1))`        | `(k + ε·2^b) / Σ_j (k_j + ε·2^b)` over all cols  |
//! | `KMeans`      | codebook index            | `codebook[k]`                                    |
//! | `KMeansNorm`  | codebook index            | ε-normalized `codebook[k]` row                   |
//!
//! Norm-Q stores exactly what `LinearFixed` stores. The normalization is
//! applied on read and needs only the levels, the shape and the scalar ε.

mod kl;
mod kmeans;
mod layerwise;
mod prune;
mod sparsity;

pub use kl::{kl_divergence_rows, KlReport};
pub use kmeans::{
    kmeans_1d, kmeans_quantize, lloyd_1d, optimal_centroids, quantile_centroids, weighted_values,
    KMeansFit, WeightedValue,
};
pub use layerwise::{
    layerwise_int_quantize, layerwise_matvec, layerwise_quantize_matrix, LayerwiseQuantized,
};
pub use prune::prune_ratio;
pub use sparsity::{sparsity, MatrixSparsity, SparsityReport, ZeroCount};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hmm::{HmmModel, MatrixName};
use crate::matrix::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    LinearFixed,
    NormQ,
    KMeans,
    KMeansNorm,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LinearFixed => "linear-fixed",
            Self::NormQ => "norm-q",
            Self::KMeans => "kmeans",
            Self::KMeansNorm => "kmeans-norm",
        }
    }

    pub fn uses_codebook(self) -> bool {
        matches!(self, Self::KMeans | Self::KMeansNorm)
    }

    pub fn normalizes_rows(self) -> bool {
        matches!(self, Self::NormQ | Self::KMeansNorm)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-fixed" | "linear" => Ok(Self::LinearFixed),
            "norm-q" | "normq" => Ok(Self::NormQ),
            "kmeans" => Ok(Self::KMeans),
            "kmeans-norm" => Ok(Self::KMeansNorm),
            other => Err(Error::Config(format!(
                "unknown quantization scheme {other:?}"
            ))),
        }
    }
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// `2^b` as a float.
#[inline]
pub fn level_scale(bits: u8) -> f64 {
    (1u64 << bits) as f64
}

#[inline]
pub fn max_level(bits: u8) -> u32 {
    ((1u64 << bits) - 1) as u32
}

/// Fixed-point level for a probability: `clip(round(p·(2^b−1)), 0, 2^b−1)`.
/// Ties round away from zero.
#[inline]
pub fn linear_level(p: f64, bits: u8) -> u32 {
    let top = max_level(bits);
    let k = (p * top as f64).round();
    if k <= 0.0 {
        0
    } else if k >= top as f64 {
        top
    } else {
        k as u32
    }
}

/// Sparse row storage of b-bit levels.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    bits: u8,
    scheme: Scheme,
    epsilon: f64,
    row_offsets: Vec<usize>,
    columns: Vec<u32>,
    levels: Vec<u32>,
    codebook: Option<Vec<f64>>,
}

impl QuantizedMatrix {
    /// Assembles a quantized matrix from raw parts, checking every storage
    /// invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        scheme: Scheme,
        epsilon: f64,
        row_offsets: Vec<usize>,
        columns: Vec<u32>,
        levels: Vec<u32>,
        codebook: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Domain(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if row_offsets.len() != rows + 1 || row_offsets[0] != 0 {
            return Err(Error::Domain("row offset table malformed".into()));
        }
        if columns.len() != levels.len() || *row_offsets.last().unwrap() != columns.len() {
            return Err(Error::Domain(
                "entry count disagrees with row offsets".into(),
            ));
        }
        let top = max_level(bits);
        for r in 0..rows {
            let (a, b) = (row_offsets[r], row_offsets[r + 1]);
            if b < a {
                return Err(Error::Domain(format!("row offsets decrease at row {r}")));
            }
            let cs = &columns[a..b];
            if cs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Domain(format!(
                    "column indices not strictly increasing in row {r}"
                )));
            }
            if cs.last().is_some_and(|&c| c as usize >= cols) {
                return Err(Error::Domain(format!(
                    "column index out of range in row {r}"
                )));
            }
        }
        match (&codebook, scheme.uses_codebook()) {
            (Some(cb), true) => {
                if cb.is_empty() || cb.len() as u64 > 1u64 << bits {
                    return Err(Error::Domain(format!(
                        "codebook of {} entries does not fit {bits} bits",
                        cb.len()
                    )));
                }
                if cb.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
                    return Err(Error::Domain(
                        "codebook centroids must be non-negative".into(),
                    ));
                }
                if let Some(&l) = levels.iter().find(|&&l| l as usize >= cb.len()) {
                    return Err(Error::Domain(format!("codebook index {l} out of range")));
                }
                if levels.iter().any(|&l| cb[l as usize] == 0.0) {
                    return Err(Error::Domain(
                        "stored entry refers to a zero centroid".into(),
                    ));
                }
            }
            (None, false) => {
                if let Some(&l) = levels.iter().find(|&&l| l == 0 || l > top) {
                    return Err(Error::Domain(format!(
                        "stored level {l} is zero or exceeds {bits} bits"
                    )));
                }
            }
            (Some(_), false) => {
                return Err(Error::Domain(format!("scheme {scheme} stores no codebook")))
            }
            (None, true) => return Err(Error::Domain(format!("scheme {scheme} needs a codebook"))),
        }
        Ok(Self {
            rows,
            cols,
            bits,
            scheme,
            epsilon,
            row_offsets,
            columns,
            levels,
            codebook,
        })
    }

    fn from_levels(
        matrix: &Matrix,
        bits: u8,
        scheme: Scheme,
        epsilon: f64,
        codebook: Option<Vec<f64>>,
        level_of: impl Fn(f64) -> Option<u32>,
    ) -> Self {
        let mut row_offsets = Vec::with_capacity(matrix.rows() + 1);
        let mut columns = Vec::new();
        let mut levels = Vec::new();
        row_offsets.push(0);
        for row in matrix.iter_rows() {
            for (j, &p) in row.iter().enumerate() {
                if let Some(k) = level_of(p) {
                    columns.push(j as u32);
                    levels.push(k);
                }
            }
            row_offsets.push(columns.len());
        }
        Self {
            rows: matrix.rows(),
            cols: matrix.cols(),
            bits,
            scheme,
            epsilon,
            row_offsets,
            columns,
            levels,
            codebook,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn codebook(&self) -> Option<&[f64]> {
        self.codebook.as_deref()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn nnz(&self) -> usize {
        self.levels.len()
    }

    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    /// `(columns, levels)` stored for row `r`.
    pub fn row_entries(&self, r: usize) -> (&[u32], &[u32]) {
        let (a, b) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.columns[a..b], &self.levels[a..b])
    }

    /// Same storage, reinterpreted under another scheme with matching
    /// storage kind (level-based or codebook-based).
    pub fn with_scheme(mut self, scheme: Scheme) -> Result<Self> {
        if scheme.uses_codebook() != self.scheme.uses_codebook() {
            return Err(Error::Config(format!(
                "cannot reinterpret {} storage as {scheme}",
                self.scheme
            )));
        }
        self.scheme = scheme;
        Ok(self)
    }

    pub fn dequantize(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        let scale = level_scale(self.bits);
        let cols = self.cols;
        crate::par::for_each_row_mut(out.as_mut_slice(), cols, |r, row| {
            let (cs, ks) = self.row_entries(r);
            match self.scheme {
                Scheme::LinearFixed => {
                    for (&c, &k) in cs.iter().zip(ks) {
                        row[c as usize] = k as f64 / scale;
                    }
                }
                Scheme::NormQ => {
                    let pad = self.epsilon * scale;
                    let denom = ks.iter().map(|&k| k as f64).sum::<f64>() + cols as f64 * pad;
                    row.fill(pad / denom);
                    for (&c, &k) in cs.iter().zip(ks) {
                        row[c as usize] = (k as f64 + pad) / denom;
                    }
                    renormalize(row);
                }
                Scheme::KMeans | Scheme::KMeansNorm => {
                    let cb = self.codebook.as_deref().expect("codebook scheme");
                    for (&c, &k) in cs.iter().zip(ks) {
                        row[c as usize] = cb[k as usize];
                    }
                    if self.scheme == Scheme::KMeansNorm {
                        normalize_row(row, self.epsilon);
                    }
                }
            }
        });
        out
    }

    /// Distinct reconstructed values appearing in row `r`.
    pub fn reconstructed_values(&self, r: usize) -> Vec<f64> {
        let m = self.dequantize();
        let mut vals: Vec<f64> = m.row(r).to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        vals
    }
}

fn check_probabilities(matrix: &Matrix) -> Result<()> {
    if let Some(v) = matrix.as_slice().iter().find(|v| v.is_nan()) {
        return Err(Error::Domain(format!("matrix contains {v}")));
    }
    Ok(())
}

/// Fixed-point linear quantization with scale `2^b` and zero point 0.
pub fn quantize_linear_fixed(matrix: &Matrix, bits: u8) -> Result<QuantizedMatrix> {
    check_bits(bits)?;
    check_probabilities(matrix)?;
    Ok(QuantizedMatrix::from_levels(
        matrix,
        bits,
        Scheme::LinearFixed,
        DEFAULT_EPSILON,
        None,
        |p| Some(linear_level(p, bits)).filter(|&k| k != 0),
    ))
}

/// Norm-Q: linear levels stored as-is, rows ε-normalized on reconstruction.
pub fn norm_q(matrix: &Matrix, bits: u8, epsilon: f64) -> Result<QuantizedMatrix> {
    check_bits(bits)?;
    check_epsilon(epsilon)?;
    check_probabilities(matrix)?;
    Ok(QuantizedMatrix::from_levels(
        matrix,
        bits,
        Scheme::NormQ,
        epsilon,
        None,
        |p| Some(linear_level(p, bits)).filter(|&k| k != 0),
    ))
}

pub fn dequantize(q: &QuantizedMatrix) -> Matrix {
    q.dequantize()
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

/// Divides a row by its computed sum.
#[inline]
fn renormalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

fn normalize_row(row: &mut [f64], epsilon: f64) {
    let denom: f64 = row.iter().map(|v| v + epsilon).sum();
    row.iter_mut().for_each(|v| *v = (*v + epsilon) / denom);
    renormalize(row);
}

/// `x_ij ← (x_ij + ε) / Σ_j (x_ij + ε)`, followed by an exact
/// renormalization pass.
pub fn normalize_rows(matrix: &Matrix, epsilon: f64) -> Result<Matrix> {
    check_epsilon(epsilon)?;
    if let Some(v) = matrix
        .as_slice()
        .iter()
        .find(|v| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(Error::Domain(format!(
            "row normalization needs finite non-negative entries, found {v}"
        )));
    }
    let mut out = matrix.clone();
    let cols = out.cols();
    crate::par::for_each_row_mut(out.as_mut_slice(), cols, |_, row| {
        normalize_row(row, epsilon)
    });
    Ok(out)
}

/// Quantized form of all three HMM matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedHmm {
    pub initial: QuantizedMatrix,
    pub transition: QuantizedMatrix,
    pub emission: QuantizedMatrix,
}

impl QuantizedHmm {
    pub fn get(&self, name: MatrixName) -> &QuantizedMatrix {
        match name {
            MatrixName::Initial => &self.initial,
            MatrixName::Transition => &self.transition,
            MatrixName::Emission => &self.emission,
        }
    }

    pub fn bits(&self) -> u8 {
        self.initial.bits()
    }

    pub fn scheme(&self) -> Scheme {
        self.initial.scheme()
    }

    pub fn dequantize(&self) -> Result<HmmModel> {
        HmmModel::from_matrices(
            self.initial.dequantize(),
            self.transition.dequantize(),
            self.emission.dequantize(),
        )
    }
}

/// Quantizes every matrix of `model` with the same scheme and width.
pub fn quantize_model(
    model: &HmmModel,
    scheme: Scheme,
    bits: u8,
    epsilon: f64,
    kmeans_iters: usize,
    seed: u64,
) -> Result<QuantizedHmm> {
    let q = |name: MatrixName| -> Result<QuantizedMatrix> {
        let m = model.matrix(name);
        match scheme {
            Scheme::LinearFixed => quantize_linear_fixed(&m, bits),
            Scheme::NormQ => norm_q(&m, bits, epsilon),
            Scheme::KMeans | Scheme::KMeansNorm => {
                let s = crate::seed::derive_indexed(seed, name as u64);
                kmeans_quantize(&m, bits, kmeans_iters, s)?
                    .with_epsilon(epsilon)?
                    .with_scheme(scheme)
            }
        }
    };
    Ok(QuantizedHmm {
        initial: q(MatrixName::Initial)?,
        transition: q(MatrixName::Transition)?,
        emission: q(MatrixName::Emission)?,
    })
}

impl QuantizedMatrix {
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        self.epsilon = epsilon;
        Ok(self)
    }
}
