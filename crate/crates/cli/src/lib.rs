//! `lpacusum`: calibrate, run and sweep change detectors from a TOML config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage,
//! 130 interrupted sweep.

pub mod artifact;
pub mod config;
pub mod selfcheck;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use lpa_cusum::model::analytic_kl;
use lpa_cusum::partition::{estimate_oracle_variance, naive_estimator_1, naive_estimator_2};
use lpa_cusum::{
    calibrate, derive_rng, derive_seed, gamma_zero, generate_stream, required_i,
    run_detector_traced, scusum_delta, sweep, write_trace_csv, CalibrationInputs, ChangePoint,
    DetectorSpec, HarnessConfig, KlDirection, LpaConfig, ModelPair, NamedDetector, OracleMode,
    SeedPurpose, StreamSpec, SweepCsvWriter, UnnormalizedPair,
};

use artifact::{header_lines, provenance, Artifact};
use config::{
    parse_config, resolve_mode, CliModel, ConfigErrors, DetectorChoice, RunConfig, Tuned,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigErrors),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lpa_cusum::Error),
    #[error("{}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("interrupted; partial results in {}", path.display())]
    Interrupted { path: PathBuf },
    #[error("self-check failed: {0}")]
    SelfCheck(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Usage(_) => 2,
            Self::Interrupted { .. } => 130,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lpacusum",
    version,
    about = "Change detection for unnormalized models"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override `master_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override `trials`.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Override `threads` (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override `output.dir`.
    #[arg(long, global = true, env = "LPACUSUM_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate gamma0 and the SCUSUM delta and save them.
    Calibrate,
    /// Estimate log(Z0/Z1) with the configured oracle.
    EstimateZ {
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Run every detector once over a single simulated stream.
    Run {
        /// Threshold `b`; defaults to `run.threshold` or the first sweep threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Write per-step statistics to trace_<id>.csv.
        #[arg(long)]
        trace: bool,
    },
    /// Monte Carlo ARL and CADD across thresholds.
    Sweep,
    /// Quick internal consistency checks.
    Selfcheck {
        /// Oracle draws for the unbiasedness checks.
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --config <FILE>".into()))?;
    let mut cfg = parse_config(path)?;
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = cli.trials {
        if t < 2 {
            return Err(CliError::Usage("--trials must be at least 2".into()));
        }
        cfg.trials = t;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(d) = &cli.out_dir {
        cfg.output.dir = d.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Selfcheck { draws } => run_selfcheck(cli, *draws),
        Command::Calibrate => cmd_calibrate(&load(cli)?),
        Command::EstimateZ { draws } => cmd_estimate_z(&load(cli)?, *draws),
        Command::Run { threshold, trace } => cmd_run(&load(cli)?, *threshold, *trace),
        Command::Sweep => cmd_sweep(&load(cli)?),
    }
}

pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().trim_end());
            ExitCode::from(e.exit_code())
        }
    }
}

fn cmd_calibrate(cfg: &RunConfig) -> Result<(), CliError> {
    let pair = cfg.model.build()?;
    let mode = resolve_mode(&cfg.oracle_mode, &pair)?;
    let mut inputs = CalibrationInputs::new(cfg.oracle_i, mode);
    inputs.epsilon = cfg.calibration.epsilon;
    inputs.pilot_draws = cfg.calibration.pilot_draws;
    inputs.check_draws = cfg.calibration.check_draws;
    inputs.kl_draws = cfg.calibration.kl_draws;
    let mut rng = derive_rng(cfg.master_seed, SeedPurpose::Calibration, 0);
    let result = calibrate(&pair, &inputs, &mut rng)?;
    let caps = pair.capabilities();
    let scusum = if caps.analytic_score && caps.exact_pre_sampler {
        let mut rng = derive_rng(cfg.master_seed, SeedPurpose::Calibration, 1);
        Some(scusum_delta(&pair, cfg.calibration.scusum_draws, &mut rng)?)
    } else {
        None
    };
    let path = cfg.calibration_path();
    println!("model          {}", result.model);
    println!("i              {}", result.i);
    println!("sigma2_hat     {:.6}", result.sigma2_hat);
    println!(
        "kl_hat         {:.6} ({:?})",
        result.kl_hat, result.kl_source
    );
    println!("epsilon        {:.6}", result.epsilon);
    println!(
        "gamma0         {:.6}{}",
        result.gamma0,
        if result.clamped { " (clamped)" } else { "" }
    );
    let c = &result.condition_check;
    println!(
        "condition      {} (moment {:.5} +/- {:.5}, {} draws)",
        if c.passed { "passed" } else { "FAILED" },
        c.estimate,
        c.std_error,
        c.n_mc
    );
    if let Some(s) = &scusum {
        println!(
            "scusum_delta   {:.6}{}",
            s.delta,
            if s.feasible { "" } else { " (infeasible)" }
        );
    }
    if !c.passed {
        eprintln!(
            "warning: the gamma condition check failed{}; the false-alarm guarantee is not certified",
            c.diagnostic.as_deref().map(|d| format!(" ({d})")).unwrap_or_default()
        );
    }
    Artifact {
        provenance: provenance(cfg),
        result,
        scusum,
    }
    .save(&path, cfg)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Detector specs with calibrated parameters filled in from `artifact`.
pub fn resolve_detectors(
    cfg: &RunConfig,
    pair: &CliModel,
    artifact: Option<&Artifact>,
) -> Result<Vec<NamedDetector<f64>>, CliError> {
    let mode = resolve_mode(&cfg.oracle_mode, pair)?;
    let need = |id: &str| {
        artifact
            .ok_or_else(|| CliError::Usage(format!("detector `{id}` needs a calibration artifact")))
    };
    cfg.detectors
        .iter()
        .map(|d| {
            let spec = match &d.choice {
                DetectorChoice::Lpa {
                    gamma: Tuned::Calibrated,
                    i,
                } => {
                    let r = &need(&d.id)?.result;
                    let gamma = if *i == r.i {
                        r.gamma0
                    } else {
                        let raw = gamma_zero(r.sigma2_hat, r.epsilon, *i as u64, r.kl_hat)?;
                        if !(raw > 0.0) {
                            return Err(lpa_cusum::Error::GammaNotPositive {
                                gamma0: raw,
                                i: *i as u64,
                                suggested_i: required_i(r.sigma2_hat, r.epsilon, 0.9, r.kl_hat)?,
                            }
                            .into());
                        }
                        raw.min(1.0)
                    };
                    DetectorSpec::Lpa(LpaConfig::new(gamma, *i, mode.clone())?)
                }
                DetectorChoice::Scusum {
                    delta: Tuned::Calibrated,
                } => {
                    let s = need(&d.id)?
                        .scusum
                        .as_ref()
                        .ok_or_else(|| CliError::Artifact {
                            path: cfg.calibration_path(),
                            message: "calibration has no SCUSUM delta for this model".into(),
                        })?;
                    if !s.feasible {
                        eprintln!(
                            "warning: detector `{}` uses an infeasible SCUSUM delta {}",
                            d.id, s.delta
                        );
                    }
                    DetectorSpec::Scusum { delta: s.delta }
                }
                _ => d.provisional_spec(&mode),
            };
            spec.check_capabilities(pair)?;
            Ok(NamedDetector {
                id: d.id.clone(),
                spec,
            })
        })
        .collect()
}

fn load_artifact_if_needed(cfg: &RunConfig) -> Result<Option<Artifact>, CliError> {
    if cfg.detectors.iter().any(|d| d.needs_calibration()) {
        Artifact::load_fresh(&cfg.calibration_path(), cfg).map(Some)
    } else {
        Ok(None)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn cmd_run(cfg: &RunConfig, threshold: Option<f64>, trace: bool) -> Result<(), CliError> {
    let b = threshold.unwrap_or_else(|| cfg.run_threshold());
    if !(b > 0.0 && b.is_finite()) {
        return Err(CliError::Usage(format!(
            "threshold must be positive and finite, got {b}"
        )));
    }
    let pair = cfg.model.build()?;
    let artifact = load_artifact_if_needed(cfg)?;
    let detectors = resolve_detectors(cfg, &pair, artifact.as_ref())?;
    let nu = cfg.sweep.change_point;
    let stream = generate_stream(
        &pair,
        &StreamSpec {
            change_point: ChangePoint::At(nu),
            length: cfg.sweep.stream_length,
            seed: derive_seed(cfg.master_seed, SeedPurpose::Single, 0),
        },
    )?;
    println!(
        "threshold b = {b:.4}, change point = {nu}, stream length = {}",
        stream.len()
    );
    println!("{:<16} {:>10} {:>10}  outcome", "detector", "tau", "delay");
    for d in &detectors {
        // one detector seed for all: common random numbers
        let mut rng = derive_rng(cfg.master_seed, SeedPurpose::Single, 1);
        let mut rows = Vec::new();
        let report = run_detector_traced(
            &d.spec,
            &pair,
            &stream,
            b,
            &mut rng,
            trace.then_some(&mut rows),
        )?;
        let (tau, delay, outcome) = match report.stop_time {
            Some(t) if t < nu => (t.to_string(), "-".to_string(), "false alarm"),
            Some(t) => (t.to_string(), (t - nu).to_string(), "detected"),
            None => ("-".into(), "-".into(), "censored"),
        };
        println!("{:<16} {tau:>10} {delay:>10}  {outcome}", d.id);
        if trace {
            let path = cfg.output.dir.join(format!("trace_{}.csv", d.id));
            let mut out = create(&path)?;
            let mut lines = header_lines(cfg, "run");
            lines.push(format!("detector: {}", d.id));
            lines.push(format!("threshold_b: {b}"));
            for l in &lines {
                writeln!(out, "# {l}").map_err(|e| CliError::io(&path, e))?;
            }
            write_trace_csv(&rows, &mut out)?;
            out.flush().map_err(|e| CliError::io(&path, e))?;
        }
    }
    Ok(())
}

/// Caveat printed with results from oracle modes that are not exactly
/// unbiased.
pub fn oracle_caveat(mode: &OracleMode<f64>) -> Option<&'static str> {
    match mode {
        OracleMode::Importance { .. } => {
            Some("self-normalized importance weights: biased for finite k")
        }
        OracleMode::Metropolis(_) => {
            Some("Metropolis path draws are approximate: not exactly unbiased")
        }
        OracleMode::Naive1 { .. } | OracleMode::Naive2 { .. } => {
            Some("naive estimator: biased for finite n_mc")
        }
        _ => None,
    }
}

pub const ESTIMATE_Z_HEADER: &str =
    "model,mode,n,mean,std_error,variance,exact,variance_bound,within_3se";

fn cmd_estimate_z(cfg: &RunConfig, draws: Option<usize>) -> Result<(), CliError> {
    let draws = draws.unwrap_or(cfg.estimate_z_draws);
    if draws < 2 {
        return Err(CliError::Usage("--draws must be at least 2".into()));
    }
    let pair = cfg.model.build()?;
    let mode = resolve_mode(&cfg.oracle_mode, &pair)?;
    let mut rng = derive_rng(cfg.master_seed, SeedPurpose::Single, 0);
    let rep = estimate_oracle_variance(&pair, &mode, draws, &mut rng)?;
    let exact = lpa_cusum::model::analytic_log_z_ratio(&pair);
    let within = exact.map(|t| (rep.sample_mean - t).abs() <= 3.0 * rep.std_error);
    println!("model            {}", pair.name());
    println!("oracle           {} ({draws} draws)", mode.kind().as_str());
    println!(
        "log(Z0/Z1)       {:.6} +/- {:.6}",
        rep.sample_mean, rep.std_error
    );
    println!("draw variance    {:.6}", rep.sample_variance);
    if let Some(b) = rep.variance_bound {
        println!("variance bound   {b:.6}");
    }
    if let (Some(t), Some(ok)) = (exact, within) {
        println!(
            "exact            {t:.6} (z = {:.2}, {} 3 SE)",
            (rep.sample_mean - t) / rep.std_error,
            if ok { "within" } else { "OUTSIDE" }
        );
    }
    if let Some(c) = oracle_caveat(&mode) {
        println!("note             {c}");
    }
    let caps = pair.capabilities();
    if caps.exact_pre_sampler {
        let v: f64 = naive_estimator_1(&pair, draws, &mut rng)?;
        println!("naive (pre)      {v:.6}");
    }
    if caps.exact_post_sampler {
        let v: f64 = naive_estimator_2(&pair, draws, &mut rng)?;
        println!("naive (post)     {v:.6}");
    }
    let path = cfg.output.dir.join("estimate_z.csv");
    let mut out = create(&path)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut text: String = header_lines(cfg, "estimate-z")
        .iter()
        .map(|l| format!("# {l}\n"))
        .collect();
    text.push_str(ESTIMATE_Z_HEADER);
    text.push('\n');
    text.push_str(&format!(
        "{},{},{draws},{},{},{},{},{},{}\n",
        pair.name(),
        mode.kind().as_str(),
        rep.sample_mean,
        rep.std_error,
        rep.sample_variance,
        opt(exact),
        opt(rep.variance_bound),
        within.map_or_else(String::new, |w| w.to_string()),
    ));
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let pair = cfg.model.build()?;
    let artifact = load_artifact_if_needed(cfg)?;
    let detectors = resolve_detectors(cfg, &pair, artifact.as_ref())?;
    let kl = artifact
        .as_ref()
        .map(|a| a.result.kl_hat)
        .or_else(|| analytic_kl(&pair, KlDirection::PostVsPre));
    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = Arc::clone(&cancel);
        // a second handler registration in one process is harmless to skip
        let _ = ctrlc::set_handler(move || cancel.store(true, Ordering::Relaxed));
    }
    let hc = HarnessConfig {
        trials: cfg.trials,
        master_seed: cfg.master_seed,
        threads: cfg.threads,
        arl_max_len: cfg.sweep.arl_max_len,
        change_point: cfg.sweep.change_point,
        stream_len: cfg.sweep.stream_length,
        measure_arl: cfg.sweep.measure_arl,
        measure_cadd: cfg.sweep.measure_cadd,
        cancel: Some(cancel),
    };
    let path = cfg.sweep_path();
    let mut comments = header_lines(cfg, "sweep");
    comments.push(format!("model: {}", pair.name()));
    comments.push(format!(
        "change_point: {}, stream_length: {}, arl_max_len: {}",
        cfg.sweep.change_point, cfg.sweep.stream_length, cfg.sweep.arl_max_len
    ));
    if let Some(a) = &artifact {
        comments.push(format!(
            "calibration_fingerprint: {}",
            a.provenance.fingerprint
        ));
    }
    if let Some(c) = oracle_caveat(&cfg.oracle_mode) {
        comments.push(format!("oracle: {c}"));
    }
    if cfg.detectors.iter().any(|d| {
        matches!(
            d.choice,
            DetectorChoice::Scusum {
                delta: Tuned::Calibrated
            }
        )
    }) {
        comments.push(
            "scusum: delta is the largest bisection value keeping the pre-change moment <= 1"
                .into(),
        );
    }
    let mut writer = SweepCsvWriter::new(create(&path)?, &comments, cfg.sweep.log10_columns)?;
    let result = sweep(&pair, &detectors, &cfg.sweep.thresholds, kl, &hc, |row| {
        eprintln!("{} b={:.4} done", row.detector, row.threshold_b);
        writer.write_row(row)
    });
    match result {
        Ok(rows) => {
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
        Err(e) => {
            writer.mark_truncated()?;
            match e {
                lpa_cusum::Error::Interrupted => Err(CliError::Interrupted { path }),
                other => Err(other.into()),
            }
        }
    }
}

fn run_selfcheck(cli: &Cli, draws: usize) -> Result<(), CliError> {
    let mut outcomes = Vec::new();
    match &cli.config {
        Some(_) => {
            let cfg = load(cli)?;
            let pair = cfg.model.build()?;
            outcomes.extend(selfcheck::check_pair(&pair, cfg.master_seed, 0, draws)?);
        }
        None => {
            let seed = cli.seed.unwrap_or(42);
            for (k, name) in ModelPair::<f64>::NAMES.iter().enumerate() {
                let pair = ModelPair::<f64>::by_name(name).expect("bundled model");
                // path draws on the 10-dimensional pair cost ~25x more
                let n = if pair.dim() > 1 { draws / 5 } else { draws };
                outcomes.extend(selfcheck::check_pair(&pair, seed, k as u64, n.max(2))?);
            }
        }
    }
    for o in &outcomes {
        println!("{}", o.line());
    }
    match outcomes
        .iter()
        .find(|o| o.status == selfcheck::Status::Fail)
    {
        Some(f) => Err(CliError::SelfCheck(f.name.clone())),
        None => Ok(()),
    }
}
