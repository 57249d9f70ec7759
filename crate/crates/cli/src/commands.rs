use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use normq::compression::{
    self, layerwise_quantize_matrix, prune_ratio, quantize_model, QuantizedHmm, Scheme,
};
use normq::decode::{build_guidance, build_keyword_dfa, success_rate};
use normq::hmm::{validate_model, MatrixName};
use normq::io::{self, ModelFile};
use normq::metrics::{compare_models, lld_gap, sparsity_sweep, Candidate, CompressionReport};
use normq::seed::{self, Purpose};
use normq::training::{self, test_loglik, Corpus, EmConfig, EmRunRecord, Quantizer};
use normq::HmmModel;
use serde::Serialize;

use crate::settings::Settings;

const DEFAULT_HIDDEN: usize = 32;
const DEFAULT_SWEEP_BITS: [u8; 2] = [4, 8];
const DEFAULT_SWEEP_INTERVALS: [usize; 6] = [1, 2, 5, 20, 50, 100];
const DEFAULT_EVAL_BITS: [u8; 3] = [8, 4, 3];

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load_dense(path: &Path) -> Result<HmmModel> {
    io::load_model(path)
        .and_then(|f| f.to_model())
        .with_context(|| format!("loading model {}", path.display()))
}

fn corpus(path: &Path, vocab: Option<usize>, chunks: usize) -> Result<Corpus> {
    io::load_corpus(path, vocab, chunks)
        .with_context(|| format!("loading corpus {}", path.display()))
}

fn em_config(s: &Settings, bits: u8, interval: usize) -> Result<EmConfig> {
    let d = EmConfig::default();
    Ok(EmConfig {
        epochs: s.epochs.unwrap_or(d.epochs),
        quantizer: match &s.quantizer {
            Some(q) => q.parse()?,
            None => Quantizer::None,
        },
        bits,
        interval,
        epsilon: s.epsilon.unwrap_or(d.epsilon),
        seed: s.seed(),
        smoothing: s.smoothing.unwrap_or(d.smoothing),
        kmeans_iters: s.kmeans_iters.unwrap_or(d.kmeans_iters),
    })
}

/// Starting model, training corpus and optional held-out corpus shared by
/// train and sweep.
fn training_inputs(s: &Settings) -> Result<(HmmModel, Corpus, Option<Corpus>)> {
    let corpus_path = Settings::require(&s.corpus, "corpus")?;
    let chunks = s.chunks.unwrap_or(1);
    let start = s.model.as_deref().map(load_dense).transpose()?;
    let vocab = s.vocab.or(start.as_ref().map(HmmModel::vocab_size));
    let train = corpus(corpus_path, vocab, chunks)?;
    let model = match start {
        Some(m) => m,
        None => HmmModel::random(
            s.hidden.unwrap_or(DEFAULT_HIDDEN),
            train.vocab_size(),
            1.0,
            seed::derive(s.seed(), Purpose::Init),
        ),
    };
    let heldout = s
        .heldout
        .as_deref()
        .map(|p| corpus(p, Some(model.vocab_size()), 1))
        .transpose()?;
    Ok((model, train, heldout))
}

pub fn synth(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let hidden = s.hidden.unwrap_or(DEFAULT_HIDDEN);
    let vocab = *Settings::require(&s.vocab, "vocab")?;
    let count = s.sequences.unwrap_or(2000);
    let length = s.length.unwrap_or(16);
    let truth = HmmModel::random(
        hidden,
        vocab,
        s.concentration.unwrap_or(0.1),
        seed::derive(s.seed(), Purpose::GroundTruth),
    );
    let train = Corpus::sample(
        &truth,
        count,
        length,
        seed::derive(s.seed(), Purpose::Corpus),
    )?;
    let heldout = Corpus::sample(
        &truth,
        (count / 4).max(1),
        length,
        seed::derive(s.seed(), Purpose::Heldout),
    )?;
    io::save_model(out.join("truth.nqhm"), &ModelFile::Dense(truth))?;
    io::save_corpus(out.join("corpus.txt"), &train)?;
    io::save_corpus(out.join("heldout.txt"), &heldout)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainRow {
    step: usize,
    epoch: usize,
    chunk: usize,
    train_lld: f64,
    test_lld: Option<f64>,
    event: bool,
    pre_event_lld: Option<f64>,
    post_event_lld: Option<f64>,
    impossible: usize,
}

fn train_rows(rec: &EmRunRecord) -> Vec<TrainRow> {
    rec.steps
        .iter()
        .map(|r| TrainRow {
            step: r.step,
            epoch: r.epoch,
            chunk: r.chunk,
            train_lld: r.train_lld,
            test_lld: r.test_lld,
            event: r.event,
            pre_event_lld: r.pre_event_lld,
            post_event_lld: r.post_event_lld,
            impossible: r.impossible,
        })
        .collect()
}

pub fn train(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let (model, corpus, heldout) = training_inputs(s)?;
    let bits = s.single_bits(8)?;
    let interval = match s.intervals(&[EmConfig::default().interval])?.as_slice() {
        [i] => *i,
        many => bail!("train takes one interval, got {many:?}"),
    };
    let cfg = em_config(s, bits, interval)?;
    let rec = training::run(&model, &corpus, &cfg, heldout.as_ref())?;
    let file = match &rec.final_quantized {
        Some(q) => ModelFile::Quantized(q.clone()),
        None => ModelFile::Dense(rec.final_model.clone()),
    };
    io::save_model(out.join("model.nqhm"), &file)?;
    write_csv(&out.join("train.csv"), &train_rows(&rec))
}

#[derive(Serialize)]
struct CompressionRow {
    matrix: String,
    rows: usize,
    cols: usize,
    total: usize,
    nonzero: f64,
    bits: u32,
    paper_style_rate: f64,
    storage_style_rate: Option<f64>,
}

fn compression_rows(r: &CompressionReport) -> Vec<CompressionRow> {
    let mut rows: Vec<CompressionRow> = r
        .matrices
        .iter()
        .map(|m| CompressionRow {
            matrix: m.matrix.clone(),
            rows: m.rows,
            cols: m.cols,
            total: m.total,
            nonzero: m.nonzero,
            bits: m.bits,
            paper_style_rate: 1.0 - m.nonzero * m.bits as f64 / (m.total as f64 * 32.0),
            // The file is not split per matrix.
            storage_style_rate: None,
        })
        .collect();
    rows.push(CompressionRow {
        matrix: "all".into(),
        rows: 0,
        cols: 0,
        total: r.matrices.iter().map(|m| m.total).sum(),
        nonzero: r.matrices.iter().map(|m| m.nonzero).sum(),
        bits: r.matrices.first().map_or(0, |m| m.bits),
        paper_style_rate: r.paper_style_rate,
        storage_style_rate: r.storage_style_rate,
    });
    rows
}

pub fn quantize(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let model = load_dense(Settings::require(&s.model, "model")?)?;
    let scheme = Settings::require(&s.scheme, "scheme")?.as_str();
    let eps = s.epsilon.unwrap_or(compression::DEFAULT_EPSILON);
    let (file, report) = match scheme {
        "prune" => {
            let ratio = *Settings::require(&s.ratio, "ratio")?;
            let renormalize = s.renormalize.unwrap_or(false);
            let pruned = model.try_map_matrices(|_, m| prune_ratio(m, ratio, renormalize, eps))?;
            let report = validate_model(&pruned, 1e-9);
            for v in &report.violations {
                eprintln!("warning: {v}");
            }
            let c = CompressionReport::for_dense(&pruned, 32);
            (ModelFile::Dense(pruned), c)
        }
        "integer" => {
            let bits = s.single_bits(8)?;
            let q = model.try_map_matrices(|_, m| layerwise_quantize_matrix(m, bits))?;
            let c = CompressionReport::for_dense(&q, bits as u32);
            (ModelFile::Dense(q), c)
        }
        other => {
            let scheme: Scheme = other
                .parse()
                .with_context(|| format!("unknown scheme {other:?}"))?;
            let q: QuantizedHmm = quantize_model(
                &model,
                scheme,
                s.single_bits(8)?,
                eps,
                s.kmeans_iters.unwrap_or(50),
                seed::derive(s.seed(), Purpose::KMeans),
            )?;
            let c = CompressionReport::for_quantized(&q);
            (ModelFile::Quantized(q), c)
        }
    };
    io::save_model(out.join("model.nqhm"), &file)?;
    write_csv(&out.join("compression.csv"), &compression_rows(&report))
}

#[derive(Serialize)]
struct CompareRow {
    reference_lld: f64,
    candidate_lld: f64,
    delta_lld: f64,
    reference_impossible: usize,
    candidate_impossible: usize,
    kl_initial: f64,
    kl_transition: f64,
    kl_emission: f64,
    sparsity_initial: f64,
    sparsity_transition: f64,
    sparsity_emission: f64,
    paper_style_rate: f64,
    storage_style_rate: Option<f64>,
}

#[derive(Serialize)]
struct SparsityRow {
    bits: Option<u8>,
    matrix: String,
    total: usize,
    zeros: usize,
    sparsity: f64,
}

pub fn eval(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let reference = load_dense(Settings::require(&s.model, "model")?)?;
    if let Some(path) = &s.candidate {
        let heldout = corpus(
            Settings::require(&s.heldout, "heldout")?,
            Some(reference.vocab_size()),
            1,
        )?;
        let file = io::load_model(path).with_context(|| format!("loading {}", path.display()))?;
        let cmp = match &file {
            ModelFile::Dense(m) => compare_models(&reference, Candidate::Dense(m), &heldout)?,
            ModelFile::Quantized(q) => {
                compare_models(&reference, Candidate::Quantized(q), &heldout)?
            }
        };
        let sp = |name: MatrixName| {
            cmp.sparsity
                .iter()
                .find(|r| r.matrix == name.as_str())
                .map_or(0.0, |r| r.sparsity)
        };
        let row = CompareRow {
            reference_lld: cmp.reference.mean_loglik,
            candidate_lld: cmp.candidate.mean_loglik,
            delta_lld: cmp.delta_lld,
            reference_impossible: cmp.reference.impossible,
            candidate_impossible: cmp.candidate.impossible,
            kl_initial: cmp.kl[0],
            kl_transition: cmp.kl[1],
            kl_emission: cmp.kl[2],
            sparsity_initial: sp(MatrixName::Initial),
            sparsity_transition: sp(MatrixName::Transition),
            sparsity_emission: sp(MatrixName::Emission),
            paper_style_rate: cmp.compression.paper_style_rate,
            storage_style_rate: cmp.compression.storage_style_rate,
        };
        write_csv(&out.join("compare.csv"), &[row])?;
    }
    let sweep = sparsity_sweep(&reference, &s.bits(&DEFAULT_EVAL_BITS)?)?;
    let rows: Vec<SparsityRow> = sweep
        .rows
        .iter()
        .map(|r| SparsityRow {
            bits: r.bits,
            matrix: r.matrix.clone(),
            total: r.total,
            zeros: r.zeros,
            sparsity: r.sparsity,
        })
        .collect();
    write_csv(&out.join("sparsity.csv"), &rows)
}

#[derive(Serialize)]
struct DecodeRow {
    guided: bool,
    trials: usize,
    max_len: usize,
    accepted: usize,
    failed: usize,
    success_rate: f64,
}

pub fn decode(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let model = load_dense(Settings::require(&s.model, "model")?)?;
    let dfa = build_keyword_dfa(&s.keywords()?, model.vocab_size())?;
    let max_len = s.max_len.unwrap_or(12);
    let trials = s.trials.unwrap_or(500);
    for w in dfa.horizon_warnings(max_len) {
        eprintln!("warning: {w}");
    }
    let table = build_guidance(&model, &dfa, max_len)?;
    let rows = [None, Some(&table)]
        .into_iter()
        .map(|g| {
            let r = success_rate(&model, &dfa, g, trials, max_len, s.seed())?;
            Ok(DecodeRow {
                guided: g.is_some(),
                trials,
                max_len,
                accepted: r.accepted,
                failed: r.failed,
                success_rate: r.rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&out.join("decode.csv"), &rows)
}

#[derive(Serialize)]
struct SweepRow {
    bits: u8,
    interval: usize,
    steps: usize,
    events: usize,
    final_train_lld: f64,
    final_test_lld: Option<f64>,
    gap_upper: Option<f64>,
    gap_lower: Option<f64>,
    gap: Option<f64>,
    paper_style_rate: Option<f64>,
    storage_style_rate: Option<f64>,
}

pub fn sweep(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let (model, corpus, heldout) = training_inputs(s)?;
    let bits = s.bits(&DEFAULT_SWEEP_BITS)?;
    let intervals = s.intervals(&DEFAULT_SWEEP_INTERVALS)?;
    let mut base = s.clone();
    base.quantizer.get_or_insert_with(|| "norm-q".into());
    let mut rows = Vec::with_capacity(bits.len() * intervals.len());
    for &b in &bits {
        for &interval in &intervals {
            let cfg = em_config(&base, b, interval)?;
            if cfg.quantizer == Quantizer::None {
                bail!("sweep needs a quantizer");
            }
            let rec = training::quantization_aware_train(&model, &corpus, &cfg, None)?;
            let gap = lld_gap(&rec).ok();
            let compression = rec
                .final_quantized
                .as_ref()
                .map(CompressionReport::for_quantized);
            rows.push(SweepRow {
                bits: b,
                interval,
                steps: rec.steps.len(),
                events: rec.event_steps().len(),
                final_train_lld: test_loglik(&rec.final_model, &corpus)?.per_token,
                final_test_lld: heldout
                    .as_ref()
                    .map(|h| test_loglik(&rec.final_model, h).map(|l| l.per_token))
                    .transpose()?,
                gap_upper: gap.map(|g| g.upper),
                gap_lower: gap.map(|g| g.lower),
                gap: gap.map(|g| g.gap),
                paper_style_rate: compression.as_ref().map(|c| c.paper_style_rate),
                storage_style_rate: compression.and_then(|c| c.storage_style_rate),
            });
        }
    }
    write_csv(&out.join("sweep.csv"), &rows)
}
