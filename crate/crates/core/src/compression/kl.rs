use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct KlReport {
    pub per_row: Vec<f64>,
    pub mean: f64,
}

/// Row-wise `D_KL(P_i ‖ Q_i)` in nats. Zero entries of `Q` are replaced by
/// `epsilon`; terms with `p = 0` contribute nothing.
pub fn kl_divergence_rows(p: &Matrix, q: &Matrix, epsilon: f64) -> Result<KlReport> {
    if p.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "P is {}x{} but Q is {}x{}",
            p.rows(),
            p.cols(),
            q.rows(),
            q.cols()
        )));
    }
    let per_row: Vec<f64> = p
        .iter_rows()
        .zip(q.iter_rows())
        .map(|(pr, qr)| {
            let kl: f64 = pr
                .iter()
                .zip(qr)
                .filter(|(&pv, _)| pv > 0.0)
                .map(|(&pv, &qv)| {
                    let qv = if qv > 0.0 { qv } else { epsilon };
                    pv * (pv / qv).ln()
                })
                .sum();
            kl.max(0.0)
        })
        .collect();
    let mean = if per_row.is_empty() {
        0.0
    } else {
        per_row.iter().sum::<f64>() / per_row.len() as f64
    };
    Ok(KlReport { per_row, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::norm_q;

    #[test]
    fn identical_rows_have_zero_divergence() {
        let p = Matrix::from_rows(&[[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]]).unwrap();
        let r = kl_divergence_rows(&p, &p, 1e-12).unwrap();
        assert_eq!(r.per_row, vec![0.0, 0.0]);
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn point_mass_against_uniform_is_ln2() {
        let p = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let r = kl_divergence_rows(&p, &q, 1e-12).unwrap();
        assert!((r.mean - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn against_norm_q_reconstruction() {
        let p = Matrix::from_rows(&[[0.7, 0.3]]).unwrap();
        // levels round(2.1) = 2 and round(0.9) = 1 give [2/3, 1/3]
        let q = norm_q(&p, 2, 1e-12).unwrap().dequantize();
        let expected = 0.7 * (0.7f64 / (2.0 / 3.0)).ln() + 0.3 * (0.3f64 / (1.0 / 3.0)).ln();
        let r = kl_divergence_rows(&p, &q, 1e-12).unwrap();
        assert!((r.mean - expected).abs() < 1e-10);
        assert!(r.mean > 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Matrix::identity(2);
        let q = Matrix::identity(3);
        assert!(matches!(
            kl_divergence_rows(&p, &q, 1e-12),
            Err(Error::Dimension(_))
        ));
    }
}
