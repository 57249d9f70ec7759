//! Baum-Welch EM over chunked corpora and quantization-aware EM.
//!
//! Each EM step consumes one chunk. In quantization-aware mode the freshly
//! maximized parameters are quantized and immediately reconstructed after
//! every `interval`-th step and after the last step, so later E-steps run on
//! values that the compressed format can represent exactly.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::compression::{self, QuantizedHmm, Scheme};
use crate::error::{Error, Result};
use crate::hmm::{self, ExpectedCounts, HmmModel, TokenSequence};
use crate::matrix::Matrix;
use crate::par;
use crate::seed;

/// Sequences per E-step work unit. Fixed so that summation order does not
/// depend on the number of workers.
const E_STEP_BLOCK: usize = 32;

pub const DEFAULT_SMOOTHING: f64 = 1e-9;

/// Training sequences split into contiguous, nearly equal chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    sequences: Vec<TokenSequence>,
    vocab_size: usize,
    num_chunks: usize,
}

impl Corpus {
    pub fn new(sequences: Vec<TokenSequence>, vocab_size: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some((i, s)) = sequences
            .iter()
            .enumerate()
            .find(|(_, s)| s.max_token() as usize >= vocab_size)
        {
            return Err(Error::Domain(format!(
                "sequence {i} has token {} outside vocabulary of size {vocab_size}",
                s.max_token()
            )));
        }
        Ok(Self {
            sequences,
            vocab_size,
            num_chunks: 1,
        })
    }

    /// `count` sequences of length `length` sampled from `model`.
    pub fn sample(model: &HmmModel, count: usize, length: usize, seed: u64) -> Result<Self> {
        Self::new(
            hmm::sample_sequences(model, count, length, seed),
            model.vocab_size(),
        )
    }

    pub fn with_chunks(mut self, num_chunks: usize) -> Result<Self> {
        if num_chunks == 0 || num_chunks > self.sequences.len() {
            return Err(Error::Config(format!(
                "cannot split {} sequences into {num_chunks} chunks",
                self.sequences.len()
            )));
        }
        self.num_chunks = num_chunks;
        Ok(self)
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(TokenSequence::len).sum()
    }

    pub fn chunk(&self, i: usize) -> &[TokenSequence] {
        let n = self.sequences.len();
        let start = i * n / self.num_chunks;
        let end = (i + 1) * n / self.num_chunks;
        &self.sequences[start..end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quantizer {
    #[default]
    None,
    NormQ,
    KMeans,
}

impl Quantizer {
    /// Storage scheme used at quantization events. K-means aware EM
    /// normalizes the clustered rows so they stay distributions.
    pub fn scheme(self) -> Option<Scheme> {
        match self {
            Self::None => None,
            Self::NormQ => Some(Scheme::NormQ),
            Self::KMeans => Some(Scheme::KMeansNorm),
        }
    }
}

impl fmt::Display for Quantizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::NormQ => "norm-q",
            Self::KMeans => "kmeans",
        })
    }
}

impl FromStr for Quantizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "norm-q" | "normq" => Ok(Self::NormQ),
            "kmeans" => Ok(Self::KMeans),
            other => Err(Error::Config(format!("unknown quantizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub epochs: usize,
    pub quantizer: Quantizer,
    pub bits: u8,
    /// EM steps between quantization events.
    pub interval: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Added to every expected count before the M-step normalization.
    pub smoothing: f64,
    pub kmeans_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            quantizer: Quantizer::None,
            bits: 8,
            interval: 20,
            epsilon: compression::DEFAULT_EPSILON,
            seed: 0,
            smoothing: DEFAULT_SMOOTHING,
            kmeans_iters: 50,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.interval == 0 {
            return Err(Error::Config(
                "quantization interval must be at least 1".into(),
            ));
        }
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return Err(Error::Config(format!(
                "invalid smoothing {}",
                self.smoothing
            )));
        }
        if self.quantizer != Quantizer::None {
            compression::check_bits(self.bits)?;
            if !(self.epsilon > 0.0) {
                return Err(Error::Config(format!("invalid epsilon {}", self.epsilon)));
            }
        }
        Ok(())
    }

    /// Whether step `step` (1-based) out of `total` ends with quantization.
    pub fn is_event(&self, step: usize, total: usize) -> bool {
        self.quantizer != Quantizer::None && (step.is_multiple_of(self.interval) || step == total)
    }
}

/// Result of one EM step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub model: HmmModel,
    /// Mean log-likelihood per sequence under the pre-update model, over
    /// sequences the model can generate.
    pub lld: f64,
    pub lld_per_token: f64,
    pub impossible: usize,
}

struct EStep {
    counts: ExpectedCounts,
    loglik: f64,
    tokens: usize,
    possible: usize,
    impossible: usize,
}

fn e_step(model: &HmmModel, chunk: &[TokenSequence]) -> Result<EStep> {
    let (n, v) = (model.hidden_size(), model.vocab_size());
    let blocks = par::map_chunks(chunk, E_STEP_BLOCK, |block| -> Result<EStep> {
        let mut out = EStep {
            counts: ExpectedCounts::zeros(n, v),
            loglik: 0.0,
            tokens: 0,
            possible: 0,
            impossible: 0,
        };
        for s in block {
            match hmm::accumulate_counts(model, s.tokens(), &mut out.counts, None) {
                Ok(ll) => {
                    out.loglik += ll;
                    out.tokens += s.len();
                    out.possible += 1;
                }
                Err(Error::ImpossibleSequence) => out.impossible += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    });
    let mut total: Option<EStep> = None;
    for b in blocks {
        let b = b?;
        match total.as_mut() {
            None => total = Some(b),
            Some(t) => {
                t.counts.add(&b.counts);
                t.loglik += b.loglik;
                t.tokens += b.tokens;
                t.possible += b.possible;
                t.impossible += b.impossible;
            }
        }
    }
    let total = total.ok_or(Error::EmptyCorpus)?;
    if total.possible == 0 {
        return Err(Error::ModelInconsistent);
    }
    Ok(total)
}

/// Normalizes `counts + smoothing`; a row with no mass keeps `previous`.
fn m_step_row(counts: &[f64], smoothing: f64, previous: &[f64], out: &mut [f64]) {
    let total: f64 = counts.iter().map(|c| c + smoothing).sum();
    if total > 0.0 && total.is_finite() {
        for (o, c) in out.iter_mut().zip(counts) {
            *o = (c + smoothing) / total;
        }
    } else {
        out.copy_from_slice(previous);
    }
}

fn m_step(model: &HmmModel, counts: &ExpectedCounts, smoothing: f64) -> HmmModel {
    let (n, v) = (model.hidden_size(), model.vocab_size());
    let mut initial = vec![0.0; n];
    m_step_row(&counts.initial, smoothing, model.initial(), &mut initial);
    let mut transition = Matrix::zeros(n, n);
    let mut emission = Matrix::zeros(n, v);
    for i in 0..n {
        m_step_row(
            counts.transition.row(i),
            smoothing,
            model.transition().row(i),
            transition.row_mut(i),
        );
        m_step_row(
            counts.emission.row(i),
            smoothing,
            model.emission().row(i),
            emission.row_mut(i),
        );
    }
    HmmModel::new(initial, transition, emission).expect("M-step keeps shapes")
}

/// One Baum-Welch step on `chunk`.
pub fn em_step(model: &HmmModel, chunk: &[TokenSequence], smoothing: f64) -> Result<StepOutcome> {
    if chunk.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let e = e_step(model, chunk)?;
    Ok(StepOutcome {
        model: m_step(model, &e.counts, smoothing),
        lld: e.loglik / e.possible as f64,
        lld_per_token: e.loglik / e.tokens as f64,
        impossible: e.impossible,
    })
}

/// Held-out likelihood summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeldoutLld {
    /// Mean log-likelihood per sequence over the sequences the model can
    /// generate; `-inf` when there are none.
    pub mean_loglik: f64,
    pub per_token: f64,
    pub sequences: usize,
    /// Sequences with probability zero, excluded from the means.
    pub impossible: usize,
}

pub fn test_loglik(model: &HmmModel, heldout: &Corpus) -> Result<HeldoutLld> {
    let lls = par::map(heldout.sequences(), |s| {
        hmm::forward_loglik(model, s).map(|ll| (ll, s.len()))
    });
    let (mut sum, mut tokens, mut possible, mut impossible) = (0.0, 0usize, 0usize, 0usize);
    for r in lls {
        let (ll, len) = r?;
        if ll.is_finite() {
            sum += ll;
            tokens += len;
            possible += 1;
        } else {
            impossible += 1;
        }
    }
    let (mean_loglik, per_token) = if possible == 0 {
        (f64::NEG_INFINITY, f64::NEG_INFINITY)
    } else {
        (sum / possible as f64, sum / tokens as f64)
    };
    Ok(HeldoutLld {
        mean_loglik,
        per_token,
        sequences: heldout.len(),
        impossible,
    })
}

/// Per-token log-likelihood of a chunk, ignoring impossible sequences.
fn chunk_lld(model: &HmmModel, chunk: &[TokenSequence]) -> Result<f64> {
    let lls = par::map(chunk, |s| {
        hmm::forward_loglik(model, s).map(|ll| (ll, s.len()))
    });
    let (mut sum, mut tokens) = (0.0, 0usize);
    for r in lls {
        let (ll, len) = r?;
        if ll.is_finite() {
            sum += ll;
            tokens += len;
        }
    }
    Ok(if tokens == 0 {
        f64::NEG_INFINITY
    } else {
        sum / tokens as f64
    })
}

/// One row of the EM trace. All likelihoods are per token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmStepRecord {
    /// 1-based.
    pub step: usize,
    pub epoch: usize,
    pub chunk: usize,
    /// Train LLD of the model entering this step, on this step's chunk.
    pub train_lld: f64,
    /// Held-out LLD of the model leaving this step.
    pub test_lld: Option<f64>,
    pub event: bool,
    /// Train LLD of the M-step output before quantization (events only).
    pub pre_event_lld: Option<f64>,
    /// Train LLD right after quantization (events only).
    pub post_event_lld: Option<f64>,
    pub impossible: usize,
}

#[derive(Debug, Clone)]
pub struct EmRunRecord {
    pub steps: Vec<EmStepRecord>,
    pub final_model: HmmModel,
    /// Stored form of the final model when training was quantization-aware.
    pub final_quantized: Option<QuantizedHmm>,
}

impl EmRunRecord {
    pub fn event_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.event)
            .map(|s| s.step)
            .collect()
    }
}

fn run_em(
    model: &HmmModel,
    corpus: &Corpus,
    config: &EmConfig,
    heldout: Option<&Corpus>,
) -> Result<EmRunRecord> {
    config.validate()?;
    if corpus.vocab_size() > model.vocab_size() {
        return Err(Error::Dimension(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size(),
            model.vocab_size()
        )));
    }
    let chunks = corpus.num_chunks();
    let total = config.epochs * chunks;
    let mut model = model.clone();
    let mut quantized = None;
    let mut steps = Vec::with_capacity(total);

    for step in 1..=total {
        let epoch = (step - 1) / chunks;
        let chunk_idx = (step - 1) % chunks;
        let chunk = corpus.chunk(chunk_idx);
        let out = em_step(&model, chunk, config.smoothing)?;
        model = out.model;

        let event = config.is_event(step, total);
        let (mut pre, mut post) = (None, None);
        if event {
            let scheme = config
                .quantizer
                .scheme()
                .expect("event implies a quantizer");
            pre = Some(chunk_lld(&model, chunk)?);
            let q = compression::quantize_model(
                &model,
                scheme,
                config.bits,
                config.epsilon,
                config.kmeans_iters,
                seed::derive_indexed(
                    seed::derive(config.seed, seed::Purpose::KMeans),
                    step as u64,
                ),
            )?;
            model = q.dequantize()?;
            quantized = Some(q);
            post = Some(chunk_lld(&model, chunk)?);
        }
        let test_lld = match heldout {
            Some(h) => Some(test_loglik(&model, h)?.per_token),
            None => None,
        };
        steps.push(EmStepRecord {
            step,
            epoch,
            chunk: chunk_idx,
            train_lld: out.lld_per_token,
            test_lld,
            event,
            pre_event_lld: pre,
            post_event_lld: post,
            impossible: out.impossible,
        });
    }
    Ok(EmRunRecord {
        steps,
        final_quantized: if config.quantizer == Quantizer::None {
            None
        } else {
            quantized
        },
        final_model: model,
    })
}

/// Plain Baum-Welch: `epochs × chunks` steps, chunks in fixed order.
pub fn train(
    model: &HmmModel,
    corpus: &Corpus,
    config: &EmConfig,
    heldout: Option<&Corpus>,
) -> Result<EmRunRecord> {
    if config.quantizer != Quantizer::None {
        return Err(Error::Config(
            "train runs unquantized EM; use quantization_aware_train".into(),
        ));
    }
    run_em(model, corpus, config, heldout)
}

/// EM with quantize-and-reconstruct after every `interval`-th M-step and
/// after the final one.
pub fn quantization_aware_train(
    model: &HmmModel,
    corpus: &Corpus,
    config: &EmConfig,
    heldout: Option<&Corpus>,
) -> Result<EmRunRecord> {
    if config.quantizer == Quantizer::None {
        return Err(Error::Config(
            "quantization-aware training needs a quantizer".into(),
        ));
    }
    run_em(model, corpus, config, heldout)
}

/// Dispatches on `config.quantizer`.
pub fn run(
    model: &HmmModel,
    corpus: &Corpus,
    config: &EmConfig,
    heldout: Option<&Corpus>,
) -> Result<EmRunRecord> {
    run_em(model, corpus, config, heldout)
}
