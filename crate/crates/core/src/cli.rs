//! `gst` command-line interface.
//!
//! Exit codes: 0 pass, 1 usage (or setup) error, 2 verification failure,
//! 3 recorded training divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checks::{random_gap_cases, sample_check, verify_gap_cases};
use crate::estimators::{EstimatorConfig, Gap};
use crate::samplers::RngStream;
use crate::tensor::Tensor;
use crate::vae::{load_dataset, run_grid, run_label, snapshot_probe, train_all, TrainConfig};
use crate::variance::{
    gradient_variance, variance_decomposition, write_variance_csv, GradientProbe, LinearLossProbe, VarianceReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gst", version, about = "Gapped straight-through estimator toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form expected gap vs Monte Carlo.
    VerifyGap(VerifyGapArgs),
    /// Distributional checks of the Gumbel-max and conditional samplers.
    SampleCheck(SampleCheckArgs),
    /// Gradient variance of one or more estimators at a frozen state.
    Variance(VarianceArgs),
    /// Train the categorical VAE.
    Train(TrainArgs),
    /// Run the ablation grid from a config.
    Ablation(TrainArgs),
}

/// Comma-separated logits as given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitList(pub Vec<f64>);

fn parse_logits(s: &str) -> Result<LogitList, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| format!("not a number: {x:?}")))
        .collect::<Result<_, _>>()?;
    if v.len() < 2 {
        return Err("need at least two logits".into());
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err("logits must be finite".into());
    }
    Ok(LogitList(v))
}

#[derive(Debug, Args)]
pub struct VerifyGapArgs {
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated logits; every index is checked unless --index is given.
    #[arg(long, value_parser = parse_logits, allow_hyphen_values = true, conflicts_with = "random_cases")]
    pub logits: Option<LogitList>,
    #[arg(long, requires = "logits")]
    pub index: Option<usize>,
    #[arg(long)]
    pub random_cases: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    /// Estimator kinds or labels, comma-separated (e.g. `GST,STGS,GR-MC100`).
    #[arg(long, default_value = "GST-1.0,STGS,GR-MC100")]
    pub estimator: String,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Gap for estimators given without one.
    #[arg(long, default_value = "1.0")]
    pub gap: String,
    /// Conditional draws for GR_MCK given without a count.
    #[arg(long = "K", default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `linear` (10-dim logits, fixed linear loss) or `vae` (trained snapshot).
    #[arg(long, default_value = "linear")]
    pub problem: String,
    /// VAE snapshot config (problem = vae).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also estimate the total-variance decomposition (n_outer = n_inner = 50).
    #[arg(long)]
    pub decompose: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: Vec<u64>,
    config_hash: String,
    config: Option<String>,
    crate_version: &'static str,
    parallel: bool,
}

fn sha256_hex(s: &str) -> String {
    Sha256::digest(s.as_bytes()).iter().fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

fn write_manifest(
    out: &Path,
    command: &str,
    args: &[String],
    seed: Vec<u64>,
    config: Option<String>,
) -> Result<(), String> {
    let hashed = config.clone().unwrap_or_else(|| args.join(" "));
    let m = Manifest {
        command,
        args: args.to_vec(),
        seed,
        config_hash: sha256_hex(&hashed),
        config,
        crate_version: env!("CARGO_PKG_VERSION"),
        parallel: cfg!(feature = "parallel"),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| e.to_string())?;
    std::fs::write(out.join("run.json"), text + "\n").map_err(|e| format!("{}: {e}", out.display()))
}

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf, String> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(dir)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let shown: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::VerifyGap(a) => verify_gap(&a, &shown),
        Command::SampleCheck(a) => cmd_sample_check(&a, &shown),
        Command::Variance(a) => cmd_variance(&a, &shown),
        Command::Train(a) => cmd_train(&a, &shown),
        Command::Ablation(a) => cmd_ablation(&a, &shown),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
    }
}

fn verify_gap(a: &VerifyGapArgs, shown: &[String]) -> Result<i32, String> {
    let rng = RngStream::new(a.seed);
    let cases: Vec<(Vec<f64>, usize)> = match (&a.logits, a.random_cases) {
        (Some(LogitList(l)), _) => match a.index {
            Some(i) if i >= l.len() => return Err(format!("--index {i} out of range")),
            Some(i) => vec![(l.clone(), i)],
            None => (0..l.len()).map(|i| (l.clone(), i)).collect(),
        },
        (None, Some(k)) => random_gap_cases(k, &rng),
        (None, None) => return Err("give --logits or --random-cases".into()),
    };
    let results = verify_gap_cases(&cases, a.n, &rng).map_err(|e| e.to_string())?;
    println!(
        "{:>4}  {:>4}  {:>3}  {:>12}  {:>12}  {:>10}  result",
        "case", "N", "i", "analytic", "mc", "stderr"
    );
    for r in &results {
        println!(
            "{:>4}  {:>4}  {:>3}  {:>12.6}  {:>12.6}  {:>10.2e}  {}",
            r.case,
            r.logits.len(),
            r.index,
            r.analytic,
            r.mc,
            r.stderr,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let passed = results.iter().filter(|r| r.pass).count();
    println!("{passed}/{} pass", results.len());
    if let Some(out) = &a.out {
        let dir = out_dir(&Some(out.clone()))?;
        let mut w = csv::Writer::from_path(dir.join("gap_cases.csv")).map_err(|e| e.to_string())?;
        w.write_record([
            "case",
            "n_categories",
            "index",
            "analytic",
            "logistic",
            "mc",
            "stderr",
            "pass",
        ])
        .map_err(|e| e.to_string())?;
        for r in &results {
            w.write_record([
                r.case.to_string(),
                r.logits.len().to_string(),
                r.index.to_string(),
                r.analytic.to_string(),
                r.logistic.to_string(),
                r.mc.to_string(),
                r.stderr.to_string(),
                r.pass.to_string(),
            ])
            .map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
        write_manifest(&dir, "verify-gap", shown, vec![a.seed], None)?;
    }
    Ok(if passed == results.len() { EXIT_OK } else { EXIT_VERIFY })
}

fn cmd_sample_check(a: &SampleCheckArgs, shown: &[String]) -> Result<i32, String> {
    let results = sample_check(a.seed, a.n).map_err(|e| e.to_string())?;
    for r in &results {
        println!(
            "{:<28} stat {:>10.5}  p {:>8.4}  {}",
            r.name,
            r.statistic,
            r.p_value,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let passed = results.iter().filter(|r| r.pass).count();
    println!("{passed}/{} pass", results.len());
    if let Some(out) = &a.out {
        let dir = out_dir(&Some(out.clone()))?;
        let mut w = csv::Writer::from_path(dir.join("sample_check.csv")).map_err(|e| e.to_string())?;
        for r in &results {
            w.serialize(r).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
        write_manifest(&dir, "sample-check", shown, vec![a.seed], None)?;
    }
    Ok(if passed == results.len() { EXIT_OK } else { EXIT_VERIFY })
}

/// Resolves a comma list of kinds or labels; bare `GST`/`NZ_GST` take
/// `gap`, bare `GR_MCK` takes `k`.
pub fn parse_estimators(list: &str, tau: f64, gap: Gap, k: usize) -> Result<Vec<EstimatorConfig>, String> {
    list.split(',')
        .map(|s| {
            let mut cfg = EstimatorConfig::from_label(s, tau).map_err(|e| e.to_string())?;
            let bare = !s.contains(|c: char| c.is_ascii_digit()) && !s.to_ascii_lowercase().contains("pi");
            if bare {
                cfg.gap = gap;
                cfg.mc_samples = k;
            }
            cfg.validate().map_err(|e| e.to_string())?;
            Ok(cfg)
        })
        .collect()
}

/// The fixed 10-dim linear-loss problem used by `variance --problem linear`.
pub fn linear_problem(seed: u64) -> LinearLossProbe {
    let mut r = RngStream::new(seed).fork(0xBEEF);
    let logits = (0..10).map(|_| r.gen_range(-2.0..2.0)).collect();
    let weights = (0..10).map(|_| r.gen_range(-1.0..1.0)).collect();
    LinearLossProbe::new(
        Tensor::matrix(1, 10, logits).expect("10 logits"),
        Tensor::matrix(1, 10, weights).expect("10 weights"),
    )
}

fn cmd_variance(a: &VarianceArgs, shown: &[String]) -> Result<i32, String> {
    let gap: Gap = a
        .gap
        .parse()
        .map_err(|e: crate::estimators::EstimatorError| e.to_string())?;
    let estimators = parse_estimators(&a.estimator, a.tau, gap, a.k)?;
    let (probe, config): (Box<dyn GradientProbe>, Option<String>) = match a.problem.as_str() {
        "linear" => (Box::new(linear_problem(a.seed)), None),
        "vae" => {
            let cfg = match &a.config {
                Some(p) => TrainConfig::from_path(p).map_err(|e| e.to_string())?,
                None => TrainConfig {
                    epochs: 1,
                    ..TrainConfig::default()
                },
            };
            let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
            let probe = snapshot_probe(&cfg, &data).map_err(|e| e.to_string())?;
            (Box::new(probe), Some(cfg.to_text()))
        }
        other => return Err(format!("unknown --problem {other:?} (linear or vae)")),
    };
    let mut reports: Vec<VarianceReport> = Vec::new();
    for (k, est) in estimators.iter().enumerate() {
        let mut rng = RngStream::new(a.seed).fork(k as u64);
        let mut rep = gradient_variance(probe.as_ref(), est, a.resamples, &mut rng).map_err(|e| e.to_string())?;
        if a.decompose {
            match variance_decomposition(probe.as_ref(), est, 50, 50, &mut rng) {
                Ok(d) => {
                    rep.term_a = d.term_a;
                    rep.term_b = d.term_b;
                    rep.term_a_stderr = d.term_a_stderr;
                    rep.term_b_stderr = d.term_b_stderr;
                }
                Err(crate::variance::VarianceError::UnsupportedKind(_)) => {}
                Err(e) => return Err(e.to_string()),
            }
        }
        reports.push(rep);
    }
    let mut order: Vec<&VarianceReport> = reports.iter().collect();
    order.sort_by(|x, y| x.total_variance.total_cmp(&y.total_variance));
    println!("{:<12} {:>14} {:>12}", "estimator", "total_var", "stderr");
    for r in &order {
        println!(
            "{:<12} {:>14.6e} {:>12.3e}",
            r.estimator, r.total_variance, r.total_variance_stderr
        );
    }
    println!(
        "ordering: {}",
        order
            .iter()
            .map(|r| r.estimator.as_str())
            .collect::<Vec<_>>()
            .join(" < ")
    );
    let dir = out_dir(&a.out)?;
    write_variance_csv(&dir.join("variance.csv"), &reports).map_err(|e| e.to_string())?;
    write_manifest(&dir, "variance", shown, vec![a.seed], config)?;
    Ok(EXIT_OK)
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig, String> {
    match path {
        Some(p) => TrainConfig::from_path(p).map_err(|e| e.to_string()),
        None => Ok(TrainConfig::default()),
    }
}

fn cmd_train(a: &TrainArgs, shown: &[String]) -> Result<i32, String> {
    let cfg = load_config(&a.config)?;
    let dir = out_dir(&a.out)?;
    write_manifest(&dir, "train", shown, cfg.seeds.clone(), Some(cfg.to_text()))?;
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let runs = train_all(&cfg, &data, Some(&dir)).map_err(|e| e.to_string())?;
    println!("{}", run_label(&cfg));
    println!(
        "{:>6} {:>6} {:>12} {:>10} {:>12}",
        "seed", "epoch", "neg_elbo", "kl", "entropy"
    );
    for run in &runs {
        for m in &run.metrics {
            println!(
                "{:>6} {:>6} {:>12.4} {:>10.4} {:>12.6}",
                run.seed, m.epoch, m.mean_neg_elbo, m.kl_term, m.mean_surrogate_entropy
            );
        }
        if let crate::vae::RunStatus::Diverged { epoch, reason } = &run.status {
            println!("seed {} diverged at epoch {epoch}: {reason}", run.seed);
        }
    }
    Ok(if runs.iter().any(|r| r.diverged()) {
        EXIT_DIVERGED
    } else {
        EXIT_OK
    })
}

fn cmd_ablation(a: &TrainArgs, shown: &[String]) -> Result<i32, String> {
    let cfg = load_config(&a.config)?;
    let dir = out_dir(&a.out)?;
    write_manifest(&dir, "ablation", shown, cfg.seeds.clone(), Some(cfg.to_text()))?;
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let rows =
        run_grid(&cfg, &data, &cfg.ablation_estimators, &cfg.ablation_taus, Some(&dir)).map_err(|e| e.to_string())?;
    println!(
        "{:<12} {:>5} {:>12} {:>10} {:>9}",
        "estimator", "tau", "neg_elbo", "std", "diverged"
    );
    for r in &rows {
        println!(
            "{:<12} {:>5} {:>12.4} {:>10.4} {:>5}/{}",
            r.label, r.tau, r.mean_neg_elbo, r.std_neg_elbo, r.diverged, r.seeds
        );
    }
    Ok(EXIT_OK)
}
