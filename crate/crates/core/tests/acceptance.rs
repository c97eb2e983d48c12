//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Tests share a lock so the timing criteria never compete for the CPU with
//! the other criteria.

mod common;

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::{grad_vec, meta_gradient_oracle_error, rel_err};
use fairmeta::autodiff::finite_difference_gradient;
use fairmeta::episodes::{
    format_dataset, generate_synthetic_family, parse_dataset, read_dataset, write_dataset, EpisodeSpec,
};
use fairmeta::fairness::{dbc, disparate_impact_from_rates, DistanceKind, FairnessConfig, ProtectedVector};
use fairmeta::harness::{self, Overrides, RunConfig};
use fairmeta::meta::{self, LearnerKind, MetaConfig, Trainer};
use fairmeta::nn::{self, init_params, MlpSpec, ParameterSet};
use fairmeta::{EpisodeSource, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle on random MLPs.

fn random_mlp(rng: &mut ChaCha8Rng) -> (MlpSpec, ParameterSet, Tensor, Vec<usize>) {
    let input = rng.random_range(1..=10);
    let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=64)).collect();
    let classes = rng.random_range(2..=6);
    let spec = MlpSpec::new(input, hidden, classes).unwrap();
    let init = init_params(&spec, rng.random()).unwrap();
    // Nonzero biases so their gradients are exercised away from the origin.
    let mut entries = Vec::new();
    for (name, t) in init.iter() {
        let t = if name.ends_with("bias") {
            let values = (0..t.data().len()).map(|_| rng.random_range(-0.5..0.5)).collect();
            Tensor::new(t.shape().to_vec(), values).unwrap()
        } else {
            t.clone()
        };
        entries.push((name.to_string(), t));
    }
    let batch = rng.random_range(1..=8);
    let x = common::uniform_tensor(rng, &[batch, input], -2.0, 2.0);
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (spec, ParameterSet::new(entries).unwrap(), x, labels)
}

#[test]
fn criterion_01_gradient_oracle() {
    let _g = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (_, params, x, labels) = random_mlp(&mut rng);
        let tape = Tape::new();
        let b = params.bind(&tape);
        let loss = nn::cross_entropy(nn::forward(&b, &x).unwrap(), &labels).unwrap();
        let analytic = b.grads(&tape.backward(loss, false).unwrap());
        let numeric = finite_difference_gradient(
            |p| {
                let t = Tape::new();
                Ok(nn::cross_entropy(nn::forward(&p.bind(&t), &x)?, &labels)?.item())
            },
            &params,
            1e-5,
        )
        .unwrap();
        worst = worst.max(rel_err(&grad_vec(&analytic, &params), &grad_vec(&numeric, &params)));
    }
    let elapsed = started.elapsed();
    report(
        1,
        worst <= 1e-5 && elapsed < Duration::from_secs(60),
        format!("100 random MLPs, worst relative error {worst:.2e} (<= 1e-5), {:.1}s (< 60s)", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------------------
// 2. Second-order meta-gradient oracle.

#[test]
fn criterion_02_meta_gradient_oracle() {
    let _g = serial();
    let started = Instant::now();
    let fair = FairnessConfig { lambda: 1.0, relaxation: 0.0, ..FairnessConfig::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        for q in [1, 2] {
            worst = worst.max(meta_gradient_oracle_error(100 + seed, q, &fair));
        }
    }
    let elapsed = started.elapsed();
    report(
        2,
        worst <= 1e-4 && elapsed < Duration::from_secs(120),
        format!("20 instances q in {{1,2}}, worst relative error {worst:.2e} (<= 1e-4), {:.1}s (< 120s)", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------------------
// 3. DBC oracle and exact properties.

fn dbc_of(s: &[u8], d: &[f64]) -> f64 {
    let tape = Tape::new();
    dbc(&ProtectedVector::new(s.to_vec()).unwrap(), tape.constant(Tensor::vector(d.to_vec()))).unwrap().item()
}

#[test]
fn criterion_03_dbc_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut oracle, mut translation, mut linearity, mut antisymmetry) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..1000 {
        let h = rng.random_range(1..=80);
        let s: Vec<u8> = (0..h).map(|_| rng.random_range(0..=1)).collect();
        let d: Vec<f64> = (0..h).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d2: Vec<f64> = (0..h).map(|_| rng.random_range(-3.0..3.0)).collect();

        let n = h as f64;
        let mean_s = s.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let mean_d = d.iter().sum::<f64>() / n;
        let mean_sd = s.iter().zip(&d).map(|(&a, b)| f64::from(a) * b).sum::<f64>() / n;
        let base = dbc_of(&s, &d);
        oracle = oracle.max((base - (mean_sd - mean_s * mean_d)).abs());

        let kappa = rng.random_range(-10.0..10.0);
        let shifted: Vec<f64> = d.iter().map(|x| x + kappa).collect();
        translation = translation.max((dbc_of(&s, &shifted) - base).abs());

        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mixed: Vec<f64> = d.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        linearity = linearity.max((dbc_of(&s, &mixed) - (a * base + b * dbc_of(&s, &d2))).abs());

        let flipped: Vec<u8> = s.iter().map(|&v| 1 - v).collect();
        antisymmetry = antisymmetry.max((dbc_of(&flipped, &d) + base).abs());
    }
    let worst = oracle.max(translation).max(linearity).max(antisymmetry);
    report(
        3,
        worst <= 1e-12,
        format!(
            "1000 instances: oracle {oracle:.1e}, translation {translation:.1e}, linearity {linearity:.1e}, antisymmetry {antisymmetry:.1e} (all <= 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Disparate-impact worked example.

#[test]
fn criterion_04_disparate_impact_example() {
    let _g = serial();
    let unfair = disparate_impact_from_rates(0.25, 0.583).unwrap();
    let fair = disparate_impact_from_rates(0.5, 0.5).unwrap();
    let pass = (unfair.ratio - 0.43).abs() <= 0.005
        && !unfair.eighty_percent_pass
        && fair.ratio == 1.0
        && fair.eighty_percent_pass;
    report(
        4,
        pass,
        format!(
            "0.25/0.583 -> {:.4} (pass={}), 0.5/0.5 -> {} (pass={})",
            unfair.ratio, unfair.eighty_percent_pass, fair.ratio, fair.eighty_percent_pass
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Trend reproduction, shared with the monotone-knob invariant.

const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Mean held-out |DBC| and accuracy per seed, for one lambda.
#[derive(Debug)]
struct Arm {
    abs_dbc: Vec<f64>,
    accuracy: Vec<f64>,
}

struct Trend {
    zero: Arm,
    one: Arm,
    ten: Arm,
    /// Wall time of the lambda 0 and lambda 10 runs.
    paired_runtime: Duration,
}

fn trend_config(lambda: f64, seed: u64, out: &std::path::Path) -> RunConfig {
    let cli = Overrides {
        ways: Some(2),
        shots: Some(5),
        query_shots: Some(15),
        classes: Some(10),
        feature_dim: Some(8),
        bias_strength: Some(0.8),
        iterations: Some(2000),
        lambda: Some(lambda),
        relaxation: Some(0.2),
        distance: Some(DistanceKind::SignedMargin),
        inner_lr: Some(0.01),
        seed: Some(seed),
        deterministic: Some(true),
        out: Some(out.to_path_buf()),
        ..Overrides::default()
    };
    harness::parse_config(&cli, None).unwrap()
}

fn run_arm(lambda: f64, dir: &std::path::Path) -> Arm {
    let mut arm = Arm { abs_dbc: vec![], accuracy: vec![] };
    for seed in TREND_SEEDS {
        let out = dir.join(format!("lambda{lambda}-seed{seed}"));
        let summary = harness::run_experiment(&trend_config(lambda, seed, &out)).unwrap().summary;
        arm.abs_dbc.push(summary.test.dbc_abs_mean);
        arm.accuracy.push(summary.test.accuracy_mean);
    }
    arm
}

fn trend() -> &'static Trend {
    static TREND: OnceLock<Trend> = OnceLock::new();
    TREND.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let zero = run_arm(0.0, dir.path());
        let ten = run_arm(10.0, dir.path());
        let paired_runtime = started.elapsed();
        let one = run_arm(1.0, dir.path());
        Trend { zero, one, ten, paired_runtime }
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_05_trend_reproduction() {
    let _g = serial();
    let t = trend();
    let (dbc0, dbc10) = (mean(&t.zero.abs_dbc), mean(&t.ten.abs_dbc));
    let (acc0, acc10) = (mean(&t.zero.accuracy), mean(&t.ten.accuracy));
    let reduction = 1.0 - dbc10 / dbc0;
    let drop_points = 100.0 * (acc0 - acc10);
    let secs = t.paired_runtime.as_secs_f64();
    report(
        5,
        reduction >= 0.30 && drop_points <= 15.0 && secs < 600.0,
        format!(
            "|DBC| {dbc0:.4} -> {dbc10:.4} ({:.1}% reduction, >= 30%), accuracy {acc0:.4} -> {acc10:.4} ({drop_points:.1} pt drop, <= 15), {secs:.0}s (< 600s)",
            100.0 * reduction
        ),
    );
}

#[test]
fn invariant_monotone_lambda_knob() {
    let _g = serial();
    let t = trend();
    let arms = [&t.zero, &t.one, &t.ten];
    let means: Vec<f64> = arms.iter().map(|a| mean(&a.abs_dbc)).collect();
    let standard_errors: Vec<f64> = arms
        .iter()
        .map(|a| meta::mean_std(&a.abs_dbc).1 / (a.abs_dbc.len() as f64).sqrt())
        .collect();
    let inversions: Vec<f64> = (0..2).filter(|&i| means[i + 1] > means[i]).map(|i| means[i + 1] - means[i]).collect();
    let pass = inversions.is_empty()
        || (inversions.len() == 1 && inversions[0] <= standard_errors.iter().cloned().fold(0.0, f64::max));
    println!(
        "invariant monotone knob: {} - mean |DBC| over lambda 0/1/10 = {:.4}/{:.4}/{:.4}",
        if pass { "PASS" } else { "FAIL" },
        means[0],
        means[1],
        means[2]
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. Fairness penalty at lambda 0 reduces to plain MAML.

fn reduction_run(fairness: FairnessConfig, out: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    let mut cfg = harness::parse_config(
        &Overrides {
            iterations: Some(60),
            hidden: Some(vec![16, 16]),
            eval_every: Some(20),
            eval_episodes: Some(10),
            test_episodes: Some(20),
            deterministic: Some(true),
            seed: Some(9),
            out: Some(out.to_path_buf()),
            ..Overrides::default()
        },
        None,
    )
    .unwrap();
    cfg.fairness = fairness;
    harness::run_experiment(&cfg).unwrap();
    (std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(out.join("params.json")).unwrap())
}

#[test]
fn criterion_06_lambda_zero_reduction() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let fair = reduction_run(FairnessConfig { lambda: 0.0, relaxation: 0.0, ..FairnessConfig::default() }, &dir.path().join("a"));
    // Same reporting threshold so the violation-rate column is comparable.
    let plain = reduction_run(FairnessConfig { relaxation: 0.0, ..FairnessConfig::disabled() }, &dir.path().join("b"));
    report(
        6,
        fair == plain,
        format!("metrics.csv identical: {}, final parameters identical: {}", fair.0 == plain.0, fair.1 == plain.1),
    );
}

// ---------------------------------------------------------------------------
// 7. Chance level, then meta-training beats a random initialisation.

#[test]
fn criterion_07_chance_and_meta_training_gain() {
    let _g = serial();
    let family = generate_synthetic_family(30, 8, 0.0, 5).unwrap();
    let ids = family.class_ids();
    let (train, held) = (family.restrict(&ids[..20]), family.restrict(&ids[20..]));
    let spec = EpisodeSpec::new(5, 1, 15).unwrap();
    let model = MlpSpec::new(8, vec![64, 64], 5).unwrap();
    let fair = FairnessConfig::default();
    let cfg = MetaConfig { inner_lr: 0.05, iterations: 300, parallel: false, ..MetaConfig::default() };
    let episodes = meta::sample_episodes(&held, &spec, 200, 7).unwrap();
    let random = init_params(&model, 1).unwrap();

    let untrained = MetaConfig { eval_inner_steps: 0, ..cfg };
    let (chance, _) = meta::evaluate(LearnerKind::FairMaml, &random, &episodes, &untrained, &fair).unwrap();
    let se = chance.accuracy_std / 200f64.sqrt();
    let at_chance = (chance.accuracy_mean - 0.2).abs() <= 3.0 * se;

    let (trained, _) = meta::train(LearnerKind::FairMaml, &train, &model, &cfg, &fair, &spec, 1).unwrap();
    let (after, _) = meta::evaluate(LearnerKind::FairMaml, &trained, &episodes, &cfg, &fair).unwrap();
    let (baseline, _) = meta::evaluate(LearnerKind::FairMaml, &random, &episodes, &cfg, &fair).unwrap();
    let gain = 100.0 * (after.accuracy_mean - baseline.accuracy_mean);
    report(
        7,
        at_chance && gain >= 10.0,
        format!(
            "untrained 5-way accuracy {:.4} (0.2 +- {:.4}); after {} adaptation steps: meta-trained {:.4} vs random {:.4} (+{gain:.1} pt, >= 10)",
            chance.accuracy_mean,
            3.0 * se,
            cfg.eval_inner_steps,
            after.accuracy_mean,
            baseline.accuracy_mean
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Prototype property and the 1-D worked example.

#[test]
fn criterion_08_prototypes() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (ways, per, width) = (rng.random_range(2..=5), rng.random_range(1..=5), rng.random_range(1..=8));
        let labels: Vec<usize> = (0..ways * per).map(|i| i % ways).collect();
        let emb = common::uniform_tensor(&mut rng, &[ways * per, width], -3.0, 3.0);
        let tape = Tape::new();
        let protos = meta::prototypes(tape.constant(emb.clone()), &labels, ways).unwrap().value();
        for c in 0..ways {
            for j in 0..width {
                let members: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| emb.at(i, j)).collect();
                let exact = members.iter().sum::<f64>() / members.len() as f64;
                worst = worst.max((protos.at(c, j) - exact).abs());
            }
        }
    }
    let tape = Tape::new();
    let query = tape.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
    let protos = tape.constant(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
    let p0 = meta::neg_sq_distances(query, protos).unwrap().log_softmax().unwrap().value().at(0, 0).exp();
    report(
        8,
        worst <= 1e-12 && (p0 - 0.8808).abs() <= 1e-4,
        format!("prototype vs exact mean max deviation {worst:.1e} (<= 1e-12); 1-D example p = {p0:.5} (0.8808 +- 1e-4)"),
    );
}

// ---------------------------------------------------------------------------
// 9. Per-iteration time grows about linearly with the meta-batch.

#[test]
fn criterion_09_runtime_scaling() {
    let _g = serial();
    let family = generate_synthetic_family(10, 8, 0.8, 2).unwrap();
    let spec = EpisodeSpec::new(2, 5, 15).unwrap();
    let model = MlpSpec::new(8, vec![64, 64], 2).unwrap();
    let trainer = |batch| {
        let cfg = MetaConfig { meta_batch: batch, iterations: 200, parallel: false, ..MetaConfig::default() };
        Trainer::new(LearnerKind::FairMaml, &model, cfg, FairnessConfig::default(), spec, 4).unwrap()
    };
    let (mut small, mut large) = (trainer(4), trainer(8));
    // Interleaved so drift in machine load hits both arms alike.
    let (mut t_small, mut t_large) = (Duration::ZERO, Duration::ZERO);
    for _ in 0..200 {
        let s = Instant::now();
        small.step(&family).unwrap();
        t_small += s.elapsed();
        let s = Instant::now();
        large.step(&family).unwrap();
        t_large += s.elapsed();
    }
    let ratio = t_large.as_secs_f64() / t_small.as_secs_f64();
    report(
        9,
        (1.5..=3.0).contains(&ratio),
        format!(
            "mean iteration {:.3} ms at T=4, {:.3} ms at T=8, ratio {ratio:.2} (in [1.5, 3.0])",
            t_small.as_secs_f64() * 5.0,
            t_large.as_secs_f64() * 5.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Bitwise reproducibility and lossless dataset files.

#[test]
fn criterion_10_determinism_and_formats() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let csvs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let cfg = harness::parse_config(
                &Overrides {
                    iterations: Some(30),
                    hidden: Some(vec![16]),
                    eval_every: Some(10),
                    eval_episodes: Some(10),
                    test_episodes: Some(20),
                    deterministic: Some(true),
                    seed: Some(21),
                    out: Some(out.clone()),
                    ..Overrides::default()
                },
                None,
            )
            .unwrap();
            harness::run_experiment(&cfg).unwrap();
            std::fs::read(out.join("metrics.csv")).unwrap()
        })
        .collect();
    let runs_identical = csvs[0] == csvs[1];

    let data = generate_synthetic_family(6, 5, 0.7, 4).unwrap().materialize(25, 6);
    let path = dir.path().join("data.txt");
    write_dataset(&data, &path).unwrap();
    let file_round_trip = read_dataset(&path).unwrap() == data;
    let text_round_trip = format_dataset(&parse_dataset(&format_dataset(&data), &path).unwrap()) == format_dataset(&data);
    report(
        10,
        runs_identical && file_round_trip && text_round_trip,
        format!(
            "metrics.csv bitwise identical: {runs_identical}; dataset round trip: {}",
            file_round_trip && text_round_trip
        ),
    );
}
