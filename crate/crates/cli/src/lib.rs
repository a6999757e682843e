//! `normgrad` command line: verification suites, gradient checks, training
//! runs and variant comparisons.
//!
//! Exit codes: 0 success, 1 invariant violation or runtime failure, 2 usage
//! error (bad flags, unreadable or invalid config).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use normgrad::gradcheck::{
    input_gradient_error, jacobian_pair, theorem1_suite, theorem2_numeric_check, well_conditioned_gaussian,
    MAX_JACOBIAN_DIM,
};
use normgrad::harness::{compare_suite, run_experiment, RunStatus};
use normgrad::numcore::{rand_gaussian, Rng};
use normgrad::{Error, ExperimentConfig, NormLayer, NormVariant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Max-abs tolerance for the gradient and Jacobian oracles.
const GRADCHECK_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "normgrad", version, about = "Normalization-layer gradient verification and training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the gradient-moment and AdaNorm identities on random inputs.
    Verify {
        #[command(subcommand)]
        which: Verify,
    },
    /// Compare analytic gradients and Jacobians against finite differences.
    Gradcheck {
        /// One variant name; all variants when omitted.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long = "H", default_value_t = 8)]
        h: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train several variants on one shared dataset and seed.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
enum Verify {
    Theorem1 {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        hmin: usize,
        #[arg(long, default_value_t = 512)]
        hmax: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write the JSON summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Theorem2 {
        #[arg(long = "C", default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 0.1)]
        k: f64,
        #[arg(long = "H", default_value_t = 128)]
        h: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Passed,
    Violated,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) | Error::InvalidParameter(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(Outcome::Passed) => EXIT_OK,
        Ok(Outcome::Violated) => EXIT_VIOLATION,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_VIOLATION
        }
    }
}

fn dispatch(cmd: Command) -> Result<Outcome, Failure> {
    match cmd {
        Command::Verify { which: Verify::Theorem1 { trials, hmin, hmax, seed, out } } => {
            verify_theorem1(trials, hmin, hmax, seed, out.as_deref())
        }
        Command::Verify { which: Verify::Theorem2 { c, k, h, trials, seed, out } } => {
            verify_theorem2(c, k, h, trials, seed, out.as_deref())
        }
        Command::Gradcheck { variant, h, seed, step } => gradcheck(variant.as_deref(), h, seed, step),
        Command::Train { config } => train(&config),
        Command::Compare { config, variants } => compare(&config, &variants),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn verify_theorem1(trials: usize, hmin: usize, hmax: usize, seed: u64, out: Option<&Path>) -> Result<Outcome, Failure> {
    if hmin < 2 || hmax < hmin || trials == 0 {
        return Err(Failure::Usage(format!(
            "need trials >= 1 and 2 <= hmin <= hmax, got trials={trials} hmin={hmin} hmax={hmax}"
        )));
    }
    let dims: Vec<usize> = (hmin..=hmax).collect();
    let summaries = theorem1_suite(&NormVariant::DETACH_FAMILY, &dims, trials, seed)?;
    for s in &summaries {
        println!(
            "{} {:<16} cases={} failures={} max_mean_err={:.3e} max_var_eq_err={:.3e} max_var_violation={:.3e}",
            if s.passed() { "PASS" } else { "FAIL" },
            s.variant.name(),
            s.cases,
            s.failures,
            s.max_mean_error,
            s.max_var_equality_error,
            s.max_violation_var,
        );
    }
    if let Some(path) = out {
        write_json(path, &summaries)?;
    }
    Ok(if summaries.iter().all(|s| s.passed()) { Outcome::Passed } else { Outcome::Violated })
}

fn verify_theorem2(c: f64, k: f64, h: usize, trials: usize, seed: u64, out: Option<&Path>) -> Result<Outcome, Failure> {
    let report = theorem2_numeric_check(c, k, h, trials, &mut Rng::seeded(seed))?;
    println!("{} {}", if report.passed { "PASS" } else { "FAIL" }, report.to_line());
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(if report.passed { Outcome::Passed } else { Outcome::Violated })
}

fn gradcheck(variant: Option<&str>, h: usize, seed: u64, step: f64) -> Result<Outcome, Failure> {
    let variants = match variant {
        Some(name) => vec![name.parse::<NormVariant>().map_err(|e| Failure::Usage(e.to_string()))?],
        None => NormVariant::ALL.to_vec(),
    };
    if h < 2 {
        return Err(Failure::Usage(format!("--H must be >= 2, got {h}")));
    }
    let mut ok = true;
    for (i, v) in variants.into_iter().enumerate() {
        let mut rng = Rng::with_stream(seed, i as u64);
        let x = well_conditioned_gaussian(&mut rng, h);
        let g = rand_gaussian(&mut rng, h);
        let mut layer = NormLayer::new(v, h, 0.0);
        if let Some(p) = layer.affine.as_mut() {
            p.gain = rand_gaussian(&mut rng, h).into_vec();
            p.bias = rand_gaussian(&mut rng, h).into_vec();
        }
        let grad_err = input_gradient_error(&layer, &x, &g, step)?;
        let jac_err = if h <= MAX_JACOBIAN_DIM { Some(jacobian_pair(&layer, &x, step)?.max_abs_err) } else { None };
        let pass = grad_err <= GRADCHECK_TOL && jac_err.is_none_or(|e| e <= GRADCHECK_TOL);
        ok &= pass;
        println!(
            "{} {:<16} H={h} grad_max_abs_err={grad_err:.3e} jacobian_max_abs_err={}",
            if pass { "PASS" } else { "FAIL" },
            v.name(),
            jac_err.map_or("skipped".into(), |e| format!("{e:.3e}")),
        );
    }
    Ok(if ok { Outcome::Passed } else { Outcome::Violated })
}

fn train(path: &Path) -> Result<Outcome, Failure> {
    let cfg = ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    let record = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e @ Error::InvariantViolation(_)) => {
            eprintln!("error: {e}");
            return Ok(Outcome::Violated);
        }
        Err(e) => return Err(e.into()),
    };
    for row in &record.epochs {
        println!(
            "epoch {:>4} train_loss={:.5} val_loss={:.5} val_acc={:.4}",
            row.epoch, row.train_loss, row.val_loss, row.val_acc
        );
    }
    println!(
        "status={} seed={} ({:?}) dataset_hash={} test_acc={} norm_checks={} wall_time={:.2}s",
        record.status.label(),
        record.provenance.seed,
        record.provenance.seed_source,
        record.provenance.dataset_hash,
        record.final_test_acc.map_or("-".into(), |a| format!("{a:.4}")),
        record.norm_checks,
        record.wall_time_secs,
    );
    if matches!(record.status, RunStatus::Diverged { .. }) {
        println!("run diverged; recorded, not treated as a failure");
    }
    Ok(Outcome::Passed)
}

fn compare(path: &Path, names: &[String]) -> Result<Outcome, Failure> {
    let base = ExperimentConfig::load_base(path).map_err(|e| Failure::Usage(e.to_string()))?;
    let variants = names
        .iter()
        .map(|n| n.parse::<NormVariant>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    match compare_suite(&base, &variants) {
        Ok(table) => {
            print!("{}", table.to_markdown());
            Ok(Outcome::Passed)
        }
        Err(e @ Error::InvariantViolation(_)) => {
            eprintln!("error: {e}");
            Ok(Outcome::Violated)
        }
        Err(e) => Err(e.into()),
    }
}
