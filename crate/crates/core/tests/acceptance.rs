//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs sequentially on one core.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use selectscale::analysis::{ablate, clean_error, AblationSettings};
use selectscale::cli::{cmd_train, CHECKPOINT_FILE, METRICS_FILE};
use selectscale::config::ExperimentConfig;
use selectscale::model::Model;
use selectscale::regularizers::{
    apply_select_scale, candidate_pool, curriculum_rate, score_feature_maps, select, Method,
    Regularizer, RegularizerConfig, ScoreMode, ScoreVector,
};
use selectscale::rng::{Domain, StreamKey};
use selectscale::selftest::{gradient_suite, mask_suite};
use selectscale::trainer::{lr_at, LrSchedule, Split, TrainConfig};
use selectscale::Tensor;

mod common;
use common::{oracle_select, random, stream, streams};

const ABLATION_RATES: [f64; 7] = [1.0, 0.94, 0.9, 0.85, 0.8, 0.75, 0.7];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn gradients() -> Outcome {
    let reports = gradient_suite(20, 0);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
    if failed.is_empty() {
        outcome(true, format!("{} checks, 20 instances each", reports.len()))
    } else {
        outcome(false, failed.join("; "))
    }
}

fn masks() -> Outcome {
    match mask_suite(0) {
        Ok(reports) => {
            let lines: Vec<String> = reports.iter().map(|r| r.to_string()).collect();
            outcome(reports.iter().all(|r| r.passed), lines.join("; "))
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn selection_oracle() -> Outcome {
    let mut gen = StreamKey::new(3, Domain::Scratch).stream();
    let mut mismatches = 0;
    let mut rejected = 0;
    for seed in 0..1000u64 {
        let c = gen.gen_range(1..80);
        let scores: Vec<f64> = (0..c)
            .map(|_| if gen.gen_bool(0.5) { gen.gen_range(0..6) as f64 } else { gen.gen_range(-5.0..5.0) })
            .collect();
        let t = gen.gen_range(0.0..=1.0);
        let p = gen.gen_range(1e-3..=1.0);
        let got = select(&ScoreVector(scores.clone()), t, p, &mut stream(seed));
        let want = oracle_select(&scores, t, p, &mut stream(seed));
        match (got, want) {
            (Ok(g), Some(w)) if g == w => {}
            (Err(_), None) => rejected += 1,
            _ => mismatches += 1,
        }
    }
    let mut semantics = true;
    for c in [10usize, 20, 64] {
        let top = (0.2 * c as f64).round() as usize;
        let scores: Vec<f64> = (0..c).map(|i| if i < top { 10.0 + (top - i) as f64 } else { 1.0 }).collect();
        for seed in 0..200 {
            let keep = select(&ScoreVector(scores.clone()), 0.2, 0.9, &mut stream(seed)).unwrap();
            let dropped: Vec<usize> = (0..c).filter(|&i| !keep[i]).collect();
            semantics &= dropped.len() == (0.1 * c as f64).round() as usize && dropped.iter().all(|&i| i < top);
        }
    }
    outcome(
        mismatches == 0 && semantics,
        format!("{mismatches} mismatches in 1000 ({rejected} rejected by both), width semantics {semantics}"),
    )
}

fn select_scale_contract() -> Outcome {
    let mut gen = StreamKey::new(4, Domain::Scratch).stream();
    let mut violations = 0;
    let mut candidates = 0usize;
    for seed in 0..1000u64 {
        let (n, c, hw) = (gen.gen_range(1..4), gen.gen_range(1..24), gen.gen_range(1..4));
        let (t, q) = (gen.gen_range(0.01..=1.0), gen.gen_range(0.0..=1.0));
        let y = random(&[n, c, hw, hw], seed, -2.0, 2.0);
        let out = apply_select_scale(&y, t, q, ScoreMode::MaxAbs, &mut streams(n, seed), true).unwrap();
        let plane = hw * hw;
        for s in 0..n {
            let sample = Tensor::new(&[c, hw, hw], y.sample(s).to_vec()).unwrap();
            let pool = candidate_pool(&score_feature_maps(&sample, ScoreMode::MaxAbs).unwrap(), t);
            candidates += pool.len();
            for m in 0..c {
                let base = (s * c + m) * plane;
                let (a, b) = (&y.data()[base..base + plane], &out.data()[base..base + plane]);
                let ok = if pool.contains(&m) {
                    a.iter().zip(b).filter(|(x, _)| **x != 0.0).all(|(x, z)| {
                        let f = (*z / *x) as f64;
                        f >= 1.0 - q - 1e-6 && f <= 1.0 + q + 1e-6
                    })
                } else {
                    a.iter().zip(b).all(|(x, z)| x.to_bits() == z.to_bits())
                };
                violations += usize::from(!ok);
            }
        }
    }
    let cfgs = [
        RegularizerConfig::dropout(0.7),
        RegularizerConfig::spatial_dropout(0.7),
        RegularizerConfig::spatial_scale(0.5),
        RegularizerConfig::selectout(0.5, 0.7),
        RegularizerConfig::select_scale(0.3, 0.5),
    ];
    let y = random(&[4, 12, 5, 5], 8, -3.0, 3.0);
    let mut not_identity = Vec::new();
    for cfg in cfgs {
        let out = Regularizer::new(&cfg).unwrap().apply(&y, &mut streams(4, 8), false).unwrap();
        if !out.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            not_identity.push(cfg.method.to_string());
        }
    }
    outcome(
        violations == 0 && not_identity.is_empty(),
        format!(
            "{violations} map violations over 1000 activations ({candidates} candidates); eval not identity for {not_identity:?}"
        ),
    )
}

fn smoke_config(method: &str, seed: u64) -> ExperimentConfig {
    let mut pairs = vec![
        ("model.kind", "resnet".to_string()),
        ("model.depth", "8".into()),
        ("model.classes", "3".into()),
        ("data.kind", "synthetic".into()),
        ("data.n", "300".into()),
        ("data.n_test", "300".into()),
        ("data.size", "16".into()),
        ("data.seed", "1".into()),
        ("data.batch_size", "32".into()),
        ("train.epochs", "30".into()),
        ("train.lr", "0.1".into()),
        ("train.milestones", "15,25".into()),
        ("train.factor", "0.2".into()),
        ("train.seed", seed.to_string()),
        ("reg.method", method.into()),
    ];
    if method == "select_scale" {
        pairs.push(("reg.t", "0.2".into()));
        pairs.push(("reg.q", "0.4".into()));
    }
    let pairs: Vec<(String, String)> = pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    ExperimentConfig::from_pairs(&pairs).unwrap()
}

/// Trains per `cfg`; returns the model and its final train error.
fn train_smoke(cfg: &ExperimentConfig) -> (Model<f32>, f64) {
    let (train_set, test_set) = cfg.load_data().unwrap();
    let mut model = Model::<f32>::build(&cfg.model, cfg.train.seed).unwrap();
    let out = selectscale::trainer::train(&mut model, &train_set, test_set.as_ref(), &cfg.train, &cfg.reg).unwrap();
    let err = out.metrics.iter().rev().find(|r| r.split == Split::Train).unwrap().error_rate;
    (model, err)
}

fn convergence(plain: &mut Option<Model<f32>>) -> Outcome {
    let (model, plain_err) = train_smoke(&smoke_config("none", 1));
    let (_, ss_err) = train_smoke(&smoke_config("select_scale", 1));
    *plain = Some(model);
    outcome(
        plain_err < 0.05 && ss_err < 0.10,
        format!("train error unregularized {plain_err:.4} (< 0.05), select_scale {ss_err:.4} (< 0.10)"),
    )
}

fn ablation(seed1: Option<Model<f32>>) -> Outcome {
    let mut lines = Vec::new();
    let mut passed = true;
    for seed in 1..=3u64 {
        let cfg = smoke_config("none", seed);
        let model = match (seed, &seed1) {
            (1, Some(m)) => m.clone(),
            _ => train_smoke(&cfg).0,
        };
        let data = cfg.eval_data().unwrap();
        let curve = |method| {
            let mut s = AblationSettings::new(method, ABLATION_RATES.to_vec(), seed);
            s.batch_size = 100;
            ablate(&model, &data, &s).unwrap().points
        };
        let (sel, spa) = (curve(Method::Selectout), curve(Method::SpatialDropout));
        let at_or_above = sel.iter().zip(&spa).skip(1).all(|(a, b)| a.1 >= b.1);
        let strictly = sel[1].1 > spa[1].1;
        passed &= at_or_above && strictly;
        let fmt = |c: &[(f64, f64)]| c.iter().map(|p| format!("{:.3}", p.1)).collect::<Vec<_>>().join(" ");
        lines.push(format!(
            "seed {seed}: clean {:.3}, selectout [{}] spatial_dropout [{}]",
            clean_error(&model, &data, 100).unwrap(),
            fmt(&sel),
            fmt(&spa)
        ));
    }
    outcome(passed, lines.join("; "))
}

fn schedules() -> Outcome {
    let step = TrainConfig {
        lr_init: 0.1,
        schedule: LrSchedule::Step { milestones: vec![60, 120, 160], factor: 0.2 },
        ..Default::default()
    };
    let want = [(0, 0.1), (59, 0.1), (60, 0.02), (119, 0.02), (120, 0.004), (159, 0.004), (160, 0.0008), (199, 0.0008)];
    let step_ok = want.iter().all(|&(e, lr)| lr_at(e, &step) == lr);
    let cosine = TrainConfig {
        epochs: 200,
        lr_init: 0.1,
        schedule: LrSchedule::Cosine { lr_min: 0.0 },
        ..Default::default()
    };
    let cosine_ok = lr_at(100, &cosine) == 0.05;
    let curriculum_ok = curriculum_rate(0, 100, 1.0, 0.8) == 1.0 && curriculum_rate(100, 100, 1.0, 0.8) == 0.8;
    outcome(
        step_ok && cosine_ok && curriculum_ok,
        format!("step {step_ok}, cosine midpoint {} ({cosine_ok}), curriculum {curriculum_ok}", lr_at(100, &cosine)),
    )
}

fn determinism() -> Outcome {
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.cfg");
    let cfg = ExperimentConfig::load(&cfg_path, &[("train.epochs".into(), "3".into())]).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        cmd_train(&cfg, d.path()).unwrap();
    }
    let same = |f: &str| std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap();
    let (csv, ssck) = (same(METRICS_FILE), same(CHECKPOINT_FILE));
    outcome(csv && ssck, format!("metrics identical {csv}, checkpoint identical {ssck}"))
}

fn report(index: usize, name: &str, limit: Option<Duration>, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut out = run();
    let took = start.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            out.passed = false;
            out.detail = format!("{} (over the {:?} limit)", out.detail, limit);
        }
    }
    let status = if out.passed { "PASS" } else { "FAIL" };
    println!("{status} [{index}] {name} ({:.1} s): {}", took.as_secs_f64(), out.detail);
    out.passed
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--list`; answer those without running.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut plain = None;
    let results = [
        report(1, "gradient suite", Some(Duration::from_secs(60)), gradients),
        report(2, "mask statistics", Some(Duration::from_secs(10)), masks),
        report(3, "select oracle equivalence", None, selection_oracle),
        report(4, "select_scale contract and eval identity", None, select_scale_contract),
        report(5, "convergence smoke", Some(Duration::from_secs(600)), || convergence(&mut plain)),
        report(6, "selective vs random ablation", Some(Duration::from_secs(300)), || ablation(plain.take())),
        report(7, "schedule formulas", None, schedules),
        report(8, "training determinism", None, determinism),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
