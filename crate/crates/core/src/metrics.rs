//! Evaluation quantities: compression rates, sparsity sweeps, LLD gaps and
//! side-by-side model comparisons.

use serde::Serialize;

use crate::compression::{
    self, kl_divergence_rows, quantize_linear_fixed, sparsity, MatrixSparsity, QuantizedHmm,
    SparsityReport,
};
use crate::error::{Error, Result};
use crate::hmm::{HmmModel, MatrixName};
use crate::io;
use crate::training::{test_loglik, Corpus, EmRunRecord, HeldoutLld};

/// Bits per uncompressed value.
pub const FP32_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixCompression {
    pub matrix: String,
    pub rows: usize,
    pub cols: usize,
    pub total: usize,
    /// Nonzero (stored) entries; fractional when derived from a sparsity.
    pub nonzero: f64,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    pub matrices: Vec<MatrixCompression>,
    /// `1 − Σ nonzero·b / (Σ total · 32)`: value bits only.
    pub paper_style_rate: f64,
    /// `1 − serialized bits / (Σ total · 32)`, when a serialized size is known.
    pub storage_style_rate: Option<f64>,
    pub serialized_bytes: Option<u64>,
}

impl CompressionReport {
    fn from_matrices(matrices: Vec<MatrixCompression>, serialized_bytes: Option<u64>) -> Self {
        let total: f64 = matrices.iter().map(|m| m.total as f64).sum();
        let value_bits: f64 = matrices.iter().map(|m| m.nonzero * m.bits as f64).sum();
        let baseline = total * FP32_BITS as f64;
        Self {
            paper_style_rate: 1.0 - value_bits / baseline,
            storage_style_rate: serialized_bytes.map(|b| 1.0 - (8 * b) as f64 / baseline),
            serialized_bytes,
            matrices,
        }
    }

    /// Rates for a quantized model; the storage rate uses the exact file
    /// size of [`io::encode`].
    pub fn for_quantized(q: &QuantizedHmm) -> Self {
        let matrices = MatrixName::ALL
            .iter()
            .map(|&name| {
                let m = q.get(name);
                MatrixCompression {
                    matrix: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                    total: m.total(),
                    nonzero: m.nnz() as f64,
                    bits: m.bits() as u32,
                }
            })
            .collect();
        Self::from_matrices(matrices, Some(io::quantized_file_size(q)))
    }

    /// Rates for a dense model stored at `bits` per nonzero value. The
    /// storage rate refers to the dense f64 file.
    pub fn for_dense(model: &HmmModel, bits: u32) -> Self {
        let matrices = MatrixName::ALL
            .iter()
            .map(|&name| {
                let m = model.matrix(name);
                MatrixCompression {
                    matrix: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                    total: m.len(),
                    nonzero: (m.len() - m.count_zeros()) as f64,
                    bits,
                }
            })
            .collect();
        Self::from_matrices(
            matrices,
            Some(io::dense_file_size(model.hidden_size(), model.vocab_size())),
        )
    }
}

/// Value-bit compression rate from per-matrix sparsities and shapes, aggregated by
/// entry count.
pub fn compression_rate(
    sparsities: &[f64],
    shapes: &[(usize, usize)],
    bits: u32,
) -> Result<CompressionReport> {
    if sparsities.len() != shapes.len() || shapes.is_empty() {
        return Err(Error::Dimension(format!(
            "{} sparsities for {} shapes",
            sparsities.len(),
            shapes.len()
        )));
    }
    if let Some(s) = sparsities.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Domain(format!("sparsity {s} outside [0, 1]")));
    }
    let names = ["initial", "transition", "emission"];
    let matrices = sparsities
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(i, (&s, &(rows, cols)))| {
            let total = rows * cols;
            MatrixCompression {
                matrix: names
                    .get(i)
                    .map_or_else(|| format!("m{i}"), |n| n.to_string()),
                rows,
                cols,
                total,
                nonzero: (1.0 - s) * total as f64,
                bits,
            }
        })
        .collect();
    Ok(CompressionReport::from_matrices(matrices, None))
}

/// Sparsity of every matrix after linear quantization at each width,
/// widest first.
pub fn sparsity_sweep(model: &HmmModel, bit_widths: &[u8]) -> Result<SparsityReport> {
    let mut widths = bit_widths.to_vec();
    widths.sort_unstable_by(|a, b| b.cmp(a));
    widths.dedup();
    let mut rows = Vec::with_capacity(widths.len() * 3);
    for b in widths {
        for name in MatrixName::ALL {
            let q = quantize_linear_fixed(&model.matrix(name), b)?;
            rows.push(sparsity(name.as_str(), &q));
        }
    }
    Ok(SparsityReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LldGapReport {
    /// Mean of the per-cycle maxima.
    pub upper: f64,
    /// Mean LLD right after each quantization event.
    pub lower: f64,
    pub gap: f64,
    pub events: usize,
}

/// Gap between the two bounds the LLD trace oscillates between.
///
/// A cycle is the run of steps ending at an event. Its maximum covers the
/// train LLD of those steps plus the pre-quantization LLD of the event, and
/// the lower sample is the post-quantization LLD (or the event's train LLD
/// if none was recorded). Steps after the last event are ignored.
pub fn lld_gap(record: &EmRunRecord) -> Result<LldGapReport> {
    let events = record.steps.iter().filter(|s| s.event).count();
    if events < 2 {
        return Err(Error::InsufficientEvents(events));
    }
    let (mut upper, mut lower) = (0.0, 0.0);
    let mut cycle_max = f64::NEG_INFINITY;
    for s in &record.steps {
        if s.event {
            let peak = s.pre_event_lld.unwrap_or(s.train_lld);
            cycle_max = cycle_max.max(peak).max(s.train_lld);
            upper += cycle_max;
            lower += s.post_event_lld.unwrap_or(s.train_lld);
            cycle_max = f64::NEG_INFINITY;
        } else {
            cycle_max = cycle_max.max(s.train_lld);
        }
    }
    let (upper, lower) = (upper / events as f64, lower / events as f64);
    Ok(LldGapReport {
        upper,
        lower,
        gap: (upper - lower).max(0.0),
        events,
    })
}

pub enum Candidate<'a> {
    Dense(&'a HmmModel),
    Quantized(&'a QuantizedHmm),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelComparison {
    pub reference: HeldoutLld,
    pub candidate: HeldoutLld,
    /// Candidate minus reference mean log-likelihood per sequence.
    pub delta_lld: f64,
    /// Mean row KL(reference ‖ candidate), ordered initial, transition,
    /// emission.
    pub kl: [f64; 3],
    pub sparsity: Vec<MatrixSparsity>,
    pub compression: CompressionReport,
}

pub fn compare_models(
    reference: &HmmModel,
    candidate: Candidate<'_>,
    heldout: &Corpus,
) -> Result<ModelComparison> {
    let (model, sparsity_rows, compression) = match candidate {
        Candidate::Dense(m) => (
            m.clone(),
            MatrixName::ALL
                .iter()
                .map(|&n| sparsity(n.as_str(), &m.matrix(n)))
                .collect::<Vec<_>>(),
            CompressionReport::for_dense(m, FP32_BITS),
        ),
        Candidate::Quantized(q) => (
            q.dequantize()?,
            MatrixName::ALL
                .iter()
                .map(|&n| sparsity(n.as_str(), q.get(n)))
                .collect(),
            CompressionReport::for_quantized(q),
        ),
    };
    if (model.hidden_size(), model.vocab_size())
        != (reference.hidden_size(), reference.vocab_size())
    {
        return Err(Error::Dimension(format!(
            "reference is {}x{}, candidate is {}x{}",
            reference.hidden_size(),
            reference.vocab_size(),
            model.hidden_size(),
            model.vocab_size()
        )));
    }
    let mut kl = [0.0; 3];
    for (slot, name) in kl.iter_mut().zip(MatrixName::ALL) {
        *slot = kl_divergence_rows(
            &reference.matrix(name),
            &model.matrix(name),
            compression::DEFAULT_EPSILON,
        )?
        .mean;
    }
    let r = test_loglik(reference, heldout)?;
    let c = test_loglik(&model, heldout)?;
    Ok(ModelComparison {
        delta_lld: c.mean_loglik - r.mean_loglik,
        reference: r,
        candidate: c,
        kl,
        sparsity: sparsity_rows,
        compression,
    })
}
