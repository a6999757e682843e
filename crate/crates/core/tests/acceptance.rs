//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails. Run with
//! `cargo test -p normgrad --test acceptance`.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use normgrad::gradcheck::{
    centering_matrix, jacobian_pair, theorem1_suite, theorem2_numeric_check, w1, w2, w3, well_conditioned_gaussian,
};
use normgrad::harness::{
    compare_suite, read_comparison_csv, read_run_csv, run_experiment, DatasetConfig, OptimizerConfig, MNIST_FILES,
};
use normgrad::normlayers::{backward_detach_mean, backward_detach_variance, backward_simple, normalize};
use normgrad::numcore::{max_abs, mean, rand_gaussian, std_pop, Rng};
use normgrad::{ExperimentConfig, NormLayer, NormVariant, RunStatus};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn fail_if(bad: Vec<String>, ok: String) -> Outcome {
    if bad.is_empty() {
        Outcome::Pass(ok)
    } else {
        Outcome::Fail(bad.join("; "))
    }
}

fn forward_invariants() -> Outcome {
    let mut rng = Rng::seeded(11);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    let mut bad = Vec::new();
    for h in [2, 3, 8, 64, 512] {
        for _ in 0..1000 {
            let x = well_conditioned_gaussian(&mut rng, h);
            let y = match normalize(&x, 0.0) {
                Ok(n) => n.y,
                Err(e) => return Outcome::Fail(format!("H={h}: {e}")),
            };
            let m = mean(&y).abs() / max_abs(&x);
            let s = (std_pop(&y) - 1.0).abs();
            worst_mean = worst_mean.max(m);
            worst_std = worst_std.max(s);
            if m > 1e-12 || s > 1e-9 {
                bad.push(format!("H={h}: |mean|/max|x|={m:e} |std-1|={s:e}"));
            }
        }
    }
    bad.truncate(5);
    fail_if(bad, format!("5000 vectors; max |mean|/max|x|={worst_mean:.2e}, max |std-1|={worst_std:.2e}"))
}

fn gradient_moments() -> Outcome {
    let mut bad = Vec::new();
    let mut lines = Vec::new();
    for (i, h) in [3, 8, 64, 512].into_iter().enumerate() {
        let summaries = match theorem1_suite(&NormVariant::DETACH_FAMILY, &[h], 1000, 100 + i as u64) {
            Ok(s) => s,
            Err(e) => return Outcome::Fail(format!("H={h}: {e}")),
        };
        let mean_err = summaries.iter().map(|s| s.max_mean_error).fold(0.0, f64::max);
        let var_err = summaries.iter().map(|s| s.max_var_equality_error).fold(0.0, f64::max);
        let viol = summaries.iter().map(|s| s.max_violation_var).fold(0.0, f64::max);
        lines.push(format!("H={h} mean_err={mean_err:.1e} var_eq_err={var_err:.1e} var_viol={viol:.1e}"));
        for s in summaries.iter().filter(|s| !s.passed()) {
            bad.push(format!("{} H={h}: {}/{} failed", s.variant, s.failures, s.cases));
        }
    }
    fail_if(bad, format!("16000 pairs; {}", lines.join(", ")))
}

fn jacobians() -> Outcome {
    let mut bad = Vec::new();
    let mut worst_layer = 0.0f64;
    for (vi, variant) in NormVariant::ALL.into_iter().enumerate() {
        let mut rng = Rng::with_stream(21, vi as u64);
        for _ in 0..50 {
            let h = rng.range_inclusive(2, 16);
            let x = well_conditioned_gaussian(&mut rng, h);
            let mut layer = NormLayer::new(variant, h, 0.0);
            if let Some(p) = layer.affine.as_mut() {
                p.gain = rand_gaussian(&mut rng, h).into_vec();
                p.bias = rand_gaussian(&mut rng, h).into_vec();
            }
            match jacobian_pair(&layer, &x, 1e-5) {
                Ok(pair) => {
                    worst_layer = worst_layer.max(pair.max_abs_err);
                    if pair.max_abs_err > 1e-6 {
                        bad.push(format!("{variant} H={h}: jacobian err {:e}", pair.max_abs_err));
                    }
                }
                Err(e) => bad.push(format!("{variant} H={h}: {e}")),
            }
        }
    }
    let mut worst_net = 0.0f64;
    let mut rejected = 0;
    for variant in NormVariant::ALL {
        for seed in 0..20 {
            let ((model, batch), r) = common::small_network_counted(variant, seed);
            rejected += r;
            let err = common::network_gradient_error(&model, &batch, 1e-4);
            worst_net = worst_net.max(err);
            if err > 1e-5 {
                bad.push(format!("{variant} seed {seed}: network gradient err {err:e}"));
            }
        }
    }
    bad.truncate(5);
    fail_if(
        bad,
        format!(
            "350 layer jacobians max err {worst_layer:.1e}; 140 networks max err {worst_net:.1e} \
             ({rejected} ill-conditioned draws redrawn)"
        ),
    )
}

fn adanorm_construction() -> Outcome {
    let r = match theorem2_numeric_check(1.0, 0.1, 128, 10_000, &mut Rng::seeded(31)) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let ok = r.max_phi_mean_err <= 1e-12 && r.max_z_mean_err <= 1e-12 && r.tail_fraction <= 0.01;
    if ok {
        Outcome::Pass(r.to_line())
    } else {
        Outcome::Fail(r.to_line())
    }
}

fn kernel_identities() -> Outcome {
    let mut rng = Rng::seeded(41);
    let mut worst = 0.0f64;
    for h in 2..=16 {
        for _ in 0..20 {
            let x = well_conditioned_gaussian(&mut rng, h);
            let layer = NormLayer::new(NormVariant::LayerNormSimple, h, 0.0);
            let cache = match layer.forward(&x) {
                Ok((_, c)) => c,
                Err(e) => return Outcome::Fail(e.to_string()),
            };
            let ones = vec![1.0; h];
            let y = cache.y.to_vec();
            let (m1, m2, m3) = (w1(&cache).unwrap(), w2(&cache).unwrap(), w3(&cache).unwrap());
            let residuals = [
                max_abs(&m1.mul_vec(&ones).unwrap()),
                max_abs(&m1.mul_vec(&y).unwrap()),
                max_abs(&m2.mul_vec(&y).unwrap()),
                max_abs(&m3.mul_vec(&ones).unwrap()),
                centering_matrix(h).mul(&m2).unwrap().max_abs_diff(&m1).unwrap(),
                // The vector routes applied to the same directions.
                max_abs(&backward_simple(&cache, &ones).unwrap()),
                max_abs(&backward_simple(&cache, &y).unwrap()),
                max_abs(&backward_detach_mean(&cache, &y).unwrap()),
                max_abs(&backward_detach_variance(&cache, &ones).unwrap()),
            ];
            worst = residuals.into_iter().fold(worst, f64::max);
        }
    }
    if worst <= 1e-12 {
        Outcome::Pass(format!("H=2..16, 300 points; max residual {worst:.1e}"))
    } else {
        Outcome::Fail(format!("max residual {worst:e} > 1e-12"))
    }
}

fn blob_config(variant: NormVariant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::blobs_default(variant);
    cfg.depth = 4;
    cfg.width = 128;
    cfg.optimizer = OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    cfg.epochs = 200;
    cfg.dataset = DatasetConfig::Blobs { classes: 3, per_class: 100, dim: 8, spread: 0.3 };
    cfg.seed = 51;
    cfg
}

fn training() -> Outcome {
    let results: Vec<_> = std::thread::scope(|s| {
        let jobs: Vec<_> =
            NormVariant::ALL.into_iter().map(|v| (v, s.spawn(move || run_experiment(&blob_config(v))))).collect();
        jobs.into_iter().map(|(v, j)| (v, j.join())).collect()
    });
    let must_fit = [NormVariant::NoNorm, NormVariant::LayerNorm, NormVariant::LayerNormSimple, NormVariant::AdaNorm];
    let mut bad = Vec::new();
    let mut lines = Vec::new();
    for (v, res) in results {
        match res {
            Err(_) => bad.push(format!("{v}: panicked")),
            Ok(Err(e)) => bad.push(format!("{v}: {e}")),
            Ok(Ok(rec)) => {
                let acc = rec.best_train_acc();
                lines.push(format!("{v}={acc:.3}/{}", rec.status.label()));
                if must_fit.contains(&v) && (rec.status != RunStatus::Completed || acc < 0.95) {
                    bad.push(format!("{v}: train acc {acc:.3}, {}", rec.status.label()));
                }
            }
        }
    }
    fail_if(bad, format!("best train acc: {}", lines.join(" ")))
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("NORMGRAD_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    MNIST_FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

fn mnist() -> Outcome {
    let Some(dir) = mnist_dir() else {
        return Outcome::Skip("MNIST files not found (set NORMGRAD_MNIST_DIR)".into());
    };
    let mut bad = Vec::new();
    let mut lines = Vec::new();
    for variant in [NormVariant::LayerNorm, NormVariant::AdaNorm] {
        let mut cfg = ExperimentConfig::blobs_default(variant);
        cfg.widths = Some(vec![256, 128]);
        cfg.epochs = 5;
        cfg.batch_size = 32;
        cfg.seed = 61;
        cfg.dataset = DatasetConfig::Mnist { dir: dir.clone() };
        match run_experiment(&cfg) {
            Err(e) => bad.push(format!("{variant}: {e}")),
            Ok(rec) => {
                let acc = rec.final_test_acc.unwrap_or(0.0);
                lines.push(format!("{variant} test acc {acc:.4}"));
                if acc < 0.97 {
                    bad.push(format!("{variant}: test acc {acc:.4} < 0.97"));
                }
            }
        }
    }
    fail_if(bad, lines.join(", "))
}

fn comparison_report() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let mut base = ExperimentConfig::blobs_default(NormVariant::LayerNorm);
    base.epochs = 10;
    base.out_dir = Some(dir.path().to_path_buf());
    let variants =
        [NormVariant::LayerNorm, NormVariant::LayerNormSimple, NormVariant::AdaNorm, NormVariant::DetachNorm];
    let table = match compare_suite(&base, &variants) {
        Ok(t) => t,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let mut bad = Vec::new();
    let csv_path = dir.path().join("compare.csv");
    match std::fs::read(&csv_path) {
        Err(e) => bad.push(format!("compare.csv: {e}")),
        Ok(bytes) => match read_comparison_csv(bytes.as_slice()) {
            Err(e) => bad.push(format!("compare.csv parse: {e}")),
            Ok(rows) => {
                let mut again = Vec::new();
                table.write_csv(&mut again).unwrap();
                if rows != table.rows || again != bytes {
                    bad.push("compare.csv does not round-trip".into());
                }
            }
        },
    }
    if !dir.path().join("compare.md").is_file() {
        bad.push("compare.md missing".into());
    }
    let hashes: std::collections::HashSet<_> = table.rows.iter().map(|r| &r.dataset_hash).collect();
    let seeds: std::collections::HashSet<_> = table.rows.iter().map(|r| r.seed).collect();
    if hashes.len() != 1 || seeds.len() != 1 {
        bad.push("variants did not share dataset and seed".into());
    }
    for v in variants {
        let path = dir.path().join(v.name()).join("run.csv");
        match std::fs::File::open(&path)
            .map_err(|e| e.to_string())
            .and_then(|f| read_run_csv(f).map_err(|e| e.to_string()))
        {
            Ok(rows) if !rows.is_empty() => {}
            Ok(_) => bad.push(format!("{}: empty run.csv", v.name())),
            Err(e) => bad.push(format!("{}: {e}", path.display())),
        }
    }
    print!("{}", table.to_markdown());
    fail_if(bad, format!("{} variants, CSV round-trip exact", table.rows.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, Check, Duration); 8] = [
        ("AC1", "forward invariants", forward_invariants, Duration::from_secs(5)),
        ("AC2", "gradient moments of the detach family", gradient_moments, Duration::from_secs(30)),
        ("AC3", "jacobians and network gradients", jacobians, Duration::from_secs(120)),
        ("AC4", "adanorm mean construction", adanorm_construction, Duration::from_secs(10)),
        ("AC5", "kernel identities", kernel_identities, Duration::from_secs(1)),
        ("AC6", "blob training", training, Duration::from_secs(300)),
        ("AC7", "mnist accuracy", mnist, Duration::from_secs(3600)),
        ("AC8", "comparison report", comparison_report, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (id, name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) if took > limit => ("FAIL", format!("{d}; exceeded time limit {limit:?}")),
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => ("FAIL", d),
            Outcome::Skip(d) => ("SKIP", d),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {id} {name} [{:.2}s]: {detail}", took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
