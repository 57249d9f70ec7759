//! Symmetric layer-wise integer quantization (zero point 0).

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::{check_bits, max_level};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseQuantized {
    pub values: Vec<i64>,
    /// `(2^b − 1) / max|v|`; dequantization divides by it.
    pub scale: f64,
}

impl LayerwiseQuantized {
    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&q| q as f64 / self.scale).collect()
    }
}

/// `q_i = clip(round(v_i · scale))` with `scale = (2^b − 1) / max|v|`.
/// An all-zero input keeps its values with scale 1.
pub fn layerwise_int_quantize(values: &[f64], bits: u8) -> Result<LayerwiseQuantized> {
    check_bits(bits)?;
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("cannot quantize {v}")));
    }
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(LayerwiseQuantized {
            values: vec![0; values.len()],
            scale: 1.0,
        });
    }
    let top = max_level(bits) as f64;
    let scale = top / max_abs;
    let values = values
        .iter()
        .map(|&v| (v * scale).round().clamp(-top, top) as i64)
        .collect();
    Ok(LayerwiseQuantized { values, scale })
}

/// Fake-quantizes a whole matrix with one scale.
pub fn layerwise_quantize_matrix(matrix: &Matrix, bits: u8) -> Result<Matrix> {
    let q = layerwise_int_quantize(matrix.as_slice(), bits)?;
    Matrix::from_vec(matrix.rows(), matrix.cols(), q.dequantize())
}

/// `xᵀ M` computed on integer operands; the accumulated integers are
/// dequantized by dividing by the product of both scales.
pub fn layerwise_matvec(x: &[f64], matrix: &Matrix, bits: u8) -> Result<Vec<f64>> {
    if x.len() != matrix.rows() {
        return Err(Error::Dimension(format!(
            "vector of length {} against {} rows",
            x.len(),
            matrix.rows()
        )));
    }
    let qx = layerwise_int_quantize(x, bits)?;
    let qm = layerwise_int_quantize(matrix.as_slice(), bits)?;
    let cols = matrix.cols();
    let mut acc = vec![0i128; cols];
    for (i, &xi) in qx.values.iter().enumerate() {
        if xi == 0 {
            continue;
        }
        for (a, &m) in acc.iter_mut().zip(&qm.values[i * cols..(i + 1) * cols]) {
            *a += xi as i128 * m as i128;
        }
    }
    let denom = qx.scale * qm.scale;
    Ok(acc.into_iter().map(|a| a as f64 / denom).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_map_to_full_range() {
        let q = layerwise_int_quantize(&[0.0, 1.0], 8).unwrap();
        assert_eq!(q.values, vec![0, 255]);
        assert_eq!(q.scale, 255.0);
    }

    #[test]
    fn single_value_round_trips_within_bound() {
        let q = layerwise_int_quantize(&[0.5], 8).unwrap();
        // max|v| = 0.5 so the scale is 510 and the value lands on the top level
        assert_eq!(q.values, vec![255]);
        assert!((q.dequantize()[0] - 0.5).abs() <= 1.0 / 510.0);
    }

    #[test]
    fn all_zero_is_identity() {
        let q = layerwise_int_quantize(&[0.0, 0.0], 4).unwrap();
        assert_eq!(q.values, vec![0, 0]);
        assert_eq!(q.scale, 1.0);
    }

    #[test]
    fn round_trip_error_is_half_a_step() {
        let v: Vec<f64> = (0..200)
            .map(|i| ((i * 7919) % 1000) as f64 / 997.0 - 0.3)
            .collect();
        for b in [3u8, 8, 12] {
            let q = layerwise_int_quantize(&v, b).unwrap();
            for (a, d) in v.iter().zip(q.dequantize()) {
                assert!((a - d).abs() <= 0.5 / q.scale + 1e-15);
            }
        }
    }

    #[test]
    fn matvec_approximates_float_product() {
        let m = Matrix::from_rows(&[[0.2, 0.8], [0.6, 0.4]]).unwrap();
        let x = [0.3, 0.7];
        let exact = [0.3 * 0.2 + 0.7 * 0.6, 0.3 * 0.8 + 0.7 * 0.4];
        let q = layerwise_matvec(&x, &m, 12).unwrap();
        for (a, b) in q.iter().zip(exact) {
            assert!((a - b).abs() < 1e-3);
        }
        let coarse = layerwise_matvec(&x, &m, 3).unwrap();
        let err = |v: &[f64]| v.iter().zip(exact).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(err(&coarse) >= err(&q));
    }
}
