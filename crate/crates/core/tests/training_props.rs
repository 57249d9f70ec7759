use normq::compression::{self, quantize_model, Scheme};
use normq::hmm::validate_model;
use normq::io::{load_model, save_model, ModelFile};
use normq::training::{
    em_step, quantization_aware_train, test_loglik, train, Corpus, EmConfig, Quantizer,
};
use normq::HmmModel;
use proptest::prelude::*;

struct Case {
    init: HmmModel,
    corpus: Corpus,
}

fn case(n: usize, v: usize, count: usize, seed: u64) -> Case {
    let truth = HmmModel::random(n, v, 0.2, seed ^ 0xA5A5);
    Case {
        init: HmmModel::random(n, v, 1.0, seed),
        corpus: Corpus::sample(&truth, count, 8, seed ^ 0x5A5A).unwrap(),
    }
}

fn config(steps: usize, smoothing: f64) -> EmConfig {
    EmConfig {
        epochs: steps,
        smoothing,
        ..EmConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn em_never_decreases_train_lld(n in 1usize..=5, v in 2usize..=8, seed in any::<u64>()) {
        let c = case(n, v, 60, seed);
        let rec = train(&c.init, &c.corpus, &config(15, 0.0), None).unwrap();
        for w in rec.steps.windows(2) {
            prop_assert!(w[1].train_lld >= w[0].train_lld - 1e-9, "{} -> {}", w[0].train_lld, w[1].train_lld);
        }
    }

    #[test]
    fn smoothed_m_steps_validate(n in 1usize..=5, v in 2usize..=8, seed in any::<u64>()) {
        let c = case(n, v, 20, seed);
        let mut m = c.init.clone();
        for _ in 0..5 {
            m = em_step(&m, c.corpus.sequences(), 1e-9).unwrap().model;
            prop_assert!(validate_model(&m, 1e-9).is_valid());
        }
    }
}

/// An M-step output is not a likelihood maximum, so rounding it onto the
/// Norm-Q grid can land on a better model. Most events still cost likelihood.
#[test]
fn quantization_event_can_raise_lld() {
    let c = case(3, 5, 60, 871246035263916219);
    let cfg = EmConfig {
        quantizer: Quantizer::NormQ,
        bits: 4,
        interval: 3,
        ..config(12, 0.0)
    };
    let rec = quantization_aware_train(&c.init, &c.corpus, &cfg, None).unwrap();
    let s = &rec.steps[5];
    assert!(s.event);
    assert!(s.post_event_lld.unwrap() > s.pre_event_lld.unwrap());
}

#[test]
fn chunked_epochs_improve_full_corpus_lld() {
    let c = case(4, 8, 400, 17);
    let corpus = c.corpus.clone().with_chunks(4).unwrap();
    let mut model = c.init.clone();
    let mut last = test_loglik(&model, &corpus).unwrap().mean_loglik;
    for _ in 0..10 {
        model = train(&model, &corpus, &config(1, 0.0), None)
            .unwrap()
            .final_model;
        let now = test_loglik(&model, &corpus).unwrap().mean_loglik;
        assert!(now >= last - 1e-9, "{last} -> {now}");
        last = now;
    }
}

#[test]
fn quantized_final_model_survives_save_and_load() {
    let c = case(4, 12, 100, 3);
    for quantizer in [Quantizer::NormQ, Quantizer::KMeans] {
        let cfg = EmConfig {
            quantizer,
            bits: 3,
            interval: 4,
            ..config(10, 1e-9)
        };
        let rec = quantization_aware_train(&c.init, &c.corpus, &cfg, None).unwrap();
        let q = rec.final_quantized.clone().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nqhm");
        save_model(&path, &ModelFile::Quantized(q)).unwrap();
        let back = load_model(&path).unwrap().to_model().unwrap();
        assert_eq!(back, rec.final_model);
    }
}

#[test]
fn em_is_thread_count_independent() {
    let c = case(6, 10, 300, 8);
    let default = em_step(&c.init, c.corpus.sequences(), 1e-9).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let single = pool.install(|| em_step(&c.init, c.corpus.sequences(), 1e-9).unwrap());
    assert_eq!(default.model, single.model);
    assert_eq!(default.lld.to_bits(), single.lld.to_bits());
}

/// On a converged model every width costs likelihood, and more bits cost
/// less.
#[test]
fn post_training_quantization_costs_likelihood() {
    let c = case(4, 10, 400, 21);
    let trained = train(&c.init, &c.corpus, &config(200, 0.0), None)
        .unwrap()
        .final_model;
    let base = test_loglik(&trained, &c.corpus).unwrap().mean_loglik;
    let mut previous = f64::NEG_INFINITY;
    for b in [2u8, 4, 8, 12] {
        let q = quantize_model(
            &trained,
            Scheme::NormQ,
            b,
            compression::DEFAULT_EPSILON,
            0,
            0,
        )
        .unwrap()
        .dequantize()
        .unwrap();
        let lld = test_loglik(&q, &c.corpus).unwrap().mean_loglik;
        assert!(lld <= base + 1e-9, "b={b}: {lld} > {base}");
        assert!(lld >= previous - 1e-6, "b={b}: {lld} < {previous}");
        previous = lld;
    }
}

/// Training closes the gap to the ground truth's own likelihood on the
/// sample it generated.
#[test]
fn trained_model_approaches_truth() {
    let truth = HmmModel::random(3, 6, 0.3, 77);
    let corpus = Corpus::sample(&truth, 2000, 10, 78).unwrap();
    let init = HmmModel::random(3, 6, 1.0, 79);
    let rec = train(&init, &corpus, &config(100, 0.0), None).unwrap();
    let truth_lld = test_loglik(&truth, &corpus).unwrap().per_token;
    let first = rec.steps[0].train_lld;
    let last = rec.steps.last().unwrap().train_lld;
    assert!(first < truth_lld);
    // Maximum likelihood fits the sample at least as well as the truth does,
    // up to local optima.
    assert!(
        last > first && (truth_lld - last) < 0.05,
        "{last} vs {truth_lld}"
    );
}
