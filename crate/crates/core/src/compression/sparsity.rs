use serde::Serialize;

use crate::matrix::Matrix;

use super::QuantizedMatrix;

/// Anything with a well-defined count of zero entries.
pub trait ZeroCount {
    fn total_entries(&self) -> usize;
    fn zero_entries(&self) -> usize;
    fn bit_width(&self) -> Option<u8> {
        None
    }
}

impl ZeroCount for Matrix {
    fn total_entries(&self) -> usize {
        self.len()
    }

    fn zero_entries(&self) -> usize {
        self.count_zeros()
    }
}

/// Zeros are the entries not stored, i.e. measured on levels before any
/// row normalization.
impl ZeroCount for QuantizedMatrix {
    fn total_entries(&self) -> usize {
        self.total()
    }

    fn zero_entries(&self) -> usize {
        self.total() - self.nnz()
    }

    fn bit_width(&self) -> Option<u8> {
        Some(self.bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixSparsity {
    pub matrix: String,
    pub bits: Option<u8>,
    pub total: usize,
    pub zeros: usize,
    pub sparsity: f64,
}

pub fn sparsity(name: impl Into<String>, m: &impl ZeroCount) -> MatrixSparsity {
    let total = m.total_entries();
    let zeros = m.zero_entries();
    MatrixSparsity {
        matrix: name.into(),
        bits: m.bit_width(),
        total,
        zeros,
        sparsity: if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SparsityReport {
    pub rows: Vec<MatrixSparsity>,
}

impl SparsityReport {
    /// Sparsity of `matrix` at `bits`, if present.
    pub fn get(&self, matrix: &str, bits: Option<u8>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.matrix == matrix && r.bits == bits)
            .map(|r| r.sparsity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::quantize_linear_fixed;

    #[test]
    fn identity_sparsity() {
        let s = sparsity("transition", &Matrix::identity(5));
        assert_eq!(s.zeros, 20);
        assert_eq!(s.sparsity, 20.0 / 25.0);
    }

    #[test]
    fn dense_positive_matrix_has_none() {
        let s = sparsity("m", &Matrix::filled(3, 4, 0.25));
        assert_eq!(s.sparsity, 0.0);
    }

    #[test]
    fn quantized_zeros_are_unstored_entries() {
        let m = Matrix::from_rows(&[[0.001, 0.999], [0.5, 0.5]]).unwrap();
        let q = quantize_linear_fixed(&m, 4).unwrap();
        let s = sparsity("m", &q);
        assert_eq!((s.zeros, s.total, s.bits), (1, 4, Some(4)));
    }
}
