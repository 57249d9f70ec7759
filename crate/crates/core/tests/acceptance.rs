//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use normq::compression::{
    self, kmeans_1d, norm_q, prune_ratio, quantize_linear_fixed, quantize_model, Scheme,
    WeightedValue,
};
use normq::decode::{build_guidance, build_keyword_dfa, success_rate};
use normq::hmm::{forward_loglik_tokens, validate_model};
use normq::io::{decode, encode, ModelFile};
use normq::metrics::{compare_models, compression_rate, Candidate};
use normq::seed::{self, Purpose};
use normq::training::{quantization_aware_train, test_loglik, train, Corpus, EmConfig, Quantizer};
use normq::HmmModel;
use rand::Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const HIDDEN: usize = 32;
const VOCAB: usize = 128;
const SEQUENCES: usize = 2000;
const LENGTH: usize = 16;
const HELDOUT: usize = 500;
const STEPS: usize = 50;

struct Setup {
    init: HmmModel,
    corpus: Corpus,
    heldout: Corpus,
}

/// Seeded ground truth, training corpus, held-out corpus and a random
/// starting model.
fn setup(seed: u64) -> Setup {
    let truth = HmmModel::random(HIDDEN, VOCAB, 0.1, seed::derive(seed, Purpose::GroundTruth));
    Setup {
        init: HmmModel::random(HIDDEN, VOCAB, 1.0, seed::derive(seed, Purpose::Init)),
        corpus: Corpus::sample(
            &truth,
            SEQUENCES,
            LENGTH,
            seed::derive(seed, Purpose::Corpus),
        )
        .unwrap(),
        heldout: Corpus::sample(
            &truth,
            HELDOUT,
            LENGTH,
            seed::derive(seed, Purpose::Heldout),
        )
        .unwrap(),
    }
}

fn em_config(seed: u64) -> EmConfig {
    EmConfig {
        epochs: STEPS,
        seed,
        smoothing: 0.0,
        ..EmConfig::default()
    }
}

fn qat_config(seed: u64, bits: u8, interval: usize) -> EmConfig {
    EmConfig {
        quantizer: Quantizer::NormQ,
        bits,
        interval,
        ..em_config(seed)
    }
}

fn c1_compression_rates() -> Outcome {
    let shapes = [(1, 4096), (4096, 4096), (4096, 50257)];
    // initial, transition, emission
    let b8 = compression_rate(&[0.9766, 0.9951, 0.9996], &shapes, 8).unwrap();
    let b3 = compression_rate(&[0.9998, 0.9994, 0.9999], &shapes, 3).unwrap();
    let (r8, r3) = (100.0 * b8.paper_style_rate, 100.0 * b3.paper_style_rate);
    let pass = (r8 - 99.9825).abs() <= 0.01 && (r3 - 99.9992).abs() <= 0.01;
    outcome(pass, format!("8-bit {r8:.4}%, 3-bit {r3:.4}%"))
}

fn c2_forward_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for case in 0..200u64 {
        let mut rng = seed::rng(seed::derive_indexed(2, case));
        let n = rng.random_range(1..=4);
        let v = rng.random_range(1..=4);
        let t = rng.random_range(1..=6);
        let conc = [0.2, 1.0, 5.0][rng.random_range(0..3)];
        let model = HmmModel::random(n, v, conc, rng.random());
        let tokens: Vec<u32> = (0..t).map(|_| rng.random_range(0..v as u32)).collect();
        let exact = common::path_sum(&model, &tokens);
        let ll = forward_loglik_tokens(&model, &tokens).unwrap();
        if exact == 0.0 {
            if ll != f64::NEG_INFINITY {
                mismatches += 1;
            }
            continue;
        }
        let rel = (ll.exp() - exact).abs() / exact;
        worst = worst.max(rel);
        if rel > 1e-10 {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("200 models, worst relative error {worst:.2e}"),
    )
}

fn matrix_family(case: u64) -> normq::Matrix {
    let mut rng = seed::rng(seed::derive_indexed(3, case));
    let rows = rng.random_range(1..=64);
    let cols = rng.random_range(1..=256);
    let conc = [0.01, 0.1, 0.5, 1.0, 3.0][rng.random_range(0..5)];
    common::stochastic(rows, cols, conc, rng.random())
}

const WIDTHS: [u8; 5] = [2, 3, 4, 6, 8];

fn c3_norm_q_totality() -> Outcome {
    let results = normq::par::map_range(1000, |case| {
        let m = matrix_family(case as u64);
        let mut worst = 0.0f64;
        let mut empty = 0;
        for b in WIDTHS {
            let d = norm_q(&m, b, compression::DEFAULT_EPSILON)
                .unwrap()
                .dequantize();
            for row in d.iter_rows() {
                let s: f64 = row.iter().sum();
                worst = worst.max((s - 1.0).abs());
                empty += row.iter().all(|&x| x == 0.0) as usize;
            }
        }
        (worst, empty)
    });
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let empty: usize = results.iter().map(|r| r.1).sum();
    outcome(
        worst <= 1e-9 && empty == 0,
        format!("5000 reconstructions, worst row-sum error {worst:.2e}, {empty} empty rows"),
    )
}

fn c4_auto_pruning() -> Outcome {
    let violations: usize = normq::par::map_range(1000, |case| {
        let m = matrix_family(case as u64);
        let s: Vec<f64> = WIDTHS
            .iter()
            .map(|&b| {
                let q = quantize_linear_fixed(&m, b).unwrap();
                1.0 - q.nnz() as f64 / q.total() as f64
            })
            .collect();
        s.windows(2).filter(|w| w[1] > w[0]).count()
    })
    .into_iter()
    .sum();
    outcome(
        violations == 0,
        format!("{violations} increases over 1000 matrices"),
    )
}

fn c5_em_monotone() -> Outcome {
    let s = setup(0);
    let rec = train(&s.init, &s.corpus, &em_config(0), None).unwrap();
    let lld: Vec<f64> = rec.steps.iter().map(|r| r.train_lld).collect();
    let worst_drop = lld
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    outcome(
        worst_drop <= 1e-9,
        format!(
            "LLD {:.4} -> {:.4} per token, largest drop {worst_drop:.2e}",
            lld[0],
            lld[lld.len() - 1]
        ),
    )
}

fn c6_oscillation() -> Outcome {
    let interval = 5;
    let s = setup(0);
    let rec =
        quantization_aware_train(&s.init, &s.corpus, &qat_config(0, 4, interval), None).unwrap();
    let mut evaluated = 0;
    let mut good = 0;
    for (i, r) in rec.steps.iter().enumerate().filter(|(_, r)| r.event) {
        let (pre, post) = (r.pre_event_lld.unwrap(), r.post_event_lld.unwrap());
        // The last event has no following interval to recover in.
        let follow = &rec.steps[i + 1..(i + 1 + interval).min(rec.steps.len())];
        if follow.len() < 2 {
            continue;
        }
        evaluated += 1;
        let recovered = follow[1..]
            .iter()
            .flat_map(|f| [Some(f.train_lld), f.pre_event_lld])
            .flatten()
            .any(|l| l > post);
        good += (post < pre && recovered) as usize;
    }
    let frac = good as f64 / evaluated.max(1) as f64;
    outcome(
        evaluated > 0 && frac >= 0.9,
        format!("{good}/{evaluated} events drop then recover"),
    )
}

fn c7_training_helps() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for bits in [3u8, 4] {
        let mut wins = 0;
        for seed in 0..5u64 {
            let s = setup(seed);
            let em = train(&s.init, &s.corpus, &em_config(seed), None).unwrap();
            let ptq = quantize_model(
                &em.final_model,
                Scheme::NormQ,
                bits,
                compression::DEFAULT_EPSILON,
                0,
                0,
            )
            .unwrap()
            .dequantize()
            .unwrap();
            let qat =
                quantization_aware_train(&s.init, &s.corpus, &qat_config(seed, bits, 5), None)
                    .unwrap();
            let ptq_lld = test_loglik(&ptq, &s.heldout).unwrap().mean_loglik;
            let qat_lld = test_loglik(&qat.final_model, &s.heldout)
                .unwrap()
                .mean_loglik;
            wins += (qat_lld >= ptq_lld) as usize;
        }
        pass &= wins >= 4;
        lines.push(format!("b={bits}: {wins}/5 seeds"));
    }
    outcome(pass, lines.join(", "))
}

fn c8_kmeans_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut rng = seed::rng(seed::derive_indexed(8, case));
        let n = rng.random_range(1..=6);
        let mut values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let points: Vec<WeightedValue> = values
            .iter()
            .map(|&value| WeightedValue {
                value,
                weight: rng.random_range(1..=10) as f64,
            })
            .collect();
        let fit = kmeans_1d(&points, 2, 100, case);
        let opt = common::contiguous_partition_optimum(&points, 2);
        worst = worst.max((fit.distortion - opt).abs());
    }
    outcome(worst <= 1e-12, format!("100 cases, worst gap {worst:.2e}"))
}

fn c9_pruning_rescue() -> Outcome {
    let (n, v) = (8, 16);
    let (initial, transition, emission) = HmmModel::random(n, v, 0.1, 9).into_parts();
    // One flat emission row: every entry is small next to the peaked rows.
    let mut rows: Vec<Vec<f64>> = emission.iter_rows().map(<[f64]>::to_vec).collect();
    rows[0] = vec![1.0 / v as f64; v];
    let emission = normq::Matrix::from_rows(&rows).unwrap();
    let model = HmmModel::new(initial, transition, emission).unwrap();
    let heldout = Corpus::sample(&model, 200, 10, 99).unwrap();

    let prune = |renormalize: bool| {
        model
            .try_map_matrices(|_, m| prune_ratio(m, 0.9, renormalize, compression::DEFAULT_EPSILON))
            .unwrap()
    };
    let raw = prune(false);
    let rescued = prune(true);
    let raw_report = validate_model(&raw, 1e-9);
    let raw_cmp = compare_models(&model, Candidate::Dense(&raw), &heldout).unwrap();
    let fixed_report = validate_model(&rescued, 1e-9);
    let fixed = test_loglik(&rescued, &heldout).unwrap();
    let pass = raw_report.has_all_zero_row()
        && raw_cmp.candidate.impossible > 0
        && fixed_report.is_valid()
        && fixed.impossible == 0
        && fixed.mean_loglik.is_finite();
    outcome(
        pass,
        format!(
            "pruned: {} violations, {}/200 impossible; renormalized: valid={}, LLD {:.3}",
            raw_report.violations.len(),
            raw_cmp.candidate.impossible,
            fixed_report.is_valid(),
            fixed.mean_loglik
        ),
    )
}

fn c10_guidance() -> Outcome {
    let (n, v, max_len, trials) = (8, 16, 12, 500);
    let model = HmmModel::random(n, v, 0.3, seed::derive(10, Purpose::GroundTruth));
    // The keyword is the token least likely to appear unguided.
    let keyword = (0..v as u32)
        .map(|x| {
            let dfa = build_keyword_dfa(&[vec![x]], v).unwrap();
            let g = build_guidance(&model, &dfa, max_len).unwrap();
            let p: f64 = (0..n)
                .map(|z| model.initial()[z] * g.value(max_len, z, 0))
                .sum();
            (x, p)
        })
        .filter(|&(_, p)| p > 0.0)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0;
    let dfa = build_keyword_dfa(&[vec![keyword]], v).unwrap();
    let table = build_guidance(&model, &dfa, max_len).unwrap();
    let unguided = success_rate(&model, &dfa, None, trials, max_len, 10)
        .unwrap()
        .rate;
    let guided = success_rate(&model, &dfa, Some(&table), trials, max_len, 10)
        .unwrap()
        .rate;

    let q8 = quantize_model(&model, Scheme::NormQ, 8, compression::DEFAULT_EPSILON, 0, 0)
        .unwrap()
        .dequantize()
        .unwrap();
    let q_table = build_guidance(&q8, &dfa, max_len).unwrap();
    let q_guided = success_rate(&q8, &dfa, Some(&q_table), trials, max_len, 10)
        .unwrap()
        .rate;
    let pass = guided - unguided >= 0.20 && (q_guided - guided).abs() <= 0.05;
    outcome(
        pass,
        format!(
            "keyword {keyword}: unguided {:.1}%, guided {:.1}%, Norm-Q 8-bit guided {:.1}%",
            100.0 * unguided,
            100.0 * guided,
            100.0 * q_guided
        ),
    )
}

fn c11_round_trip() -> Outcome {
    let schemes = [
        Scheme::LinearFixed,
        Scheme::NormQ,
        Scheme::KMeans,
        Scheme::KMeansNorm,
    ];
    let mut failures = Vec::new();
    for case in 0..50u64 {
        let mut rng = seed::rng(seed::derive_indexed(11, case));
        let n = rng.random_range(1..=24);
        let v = rng.random_range(1..=64);
        let bits = rng.random_range(1..=12u8);
        let scheme = schemes[case as usize % schemes.len()];
        let model = HmmModel::random(n, v, [0.05, 0.5, 2.0][case as usize % 3], rng.random());
        let q =
            quantize_model(&model, scheme, bits, compression::DEFAULT_EPSILON, 30, case).unwrap();
        let file = ModelFile::Quantized(q.clone());
        let bytes = encode(&file);
        let back = decode(&bytes).unwrap();
        let same = back == file
            && back.to_model().unwrap() == q.dequantize().unwrap()
            && encode(&back) == bytes;
        let size = bytes.len() as u64 == common::analytic_file_size(&q);
        if !(same && size) {
            failures.push(case);
        }
    }
    outcome(
        failures.is_empty(),
        format!("50 models, failing cases {failures:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("compression-rate reproduction", c1_compression_rates),
        ("forward oracle", c2_forward_oracle),
        ("Norm-Q totality", c3_norm_q_totality),
        ("auto-pruning monotonicity", c4_auto_pruning),
        ("EM monotonicity", c5_em_monotone),
        ("oscillation pattern", c6_oscillation),
        ("training helps", c7_training_helps),
        ("1-D K-means oracle", c8_kmeans_oracle),
        ("pruning rescue", c9_pruning_rescue),
        ("guidance efficacy", c10_guidance),
        ("round trip and size formula", c11_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        failed += !o.pass as usize;
        println!(
            "{} {:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{}/11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
