//! `oftkit` command-line front end.
//!
//! JSON results go to stdout, human-readable notes to stderr. Exit codes:
//! 0 success, 2 configuration error, 3 numeric invariant failure, 4 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oftkit::grad::{grad_check, SquaredError, DEFAULT_FD_STEP};
use oftkit::store::{self, AdapterFile, Entry};
use oftkit::train::{self, DriftSettings, ExperimentConfig, Fig2Result, Fig2Settings, ToyTaskSpec};
use oftkit::{energy, param_count, Adapter, Mat, Mode, OftError, ParamMethod};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const PRECISION_ENV: &str = "OFTKIT_PRECISION_CHECK";
const ENERGY_TOL: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-5;
const BASELINE_DRIFT_MIN: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "oftkit", version, about = "Orthogonal finetuning adapters: training, audits and export")]
struct Cli {
    /// Random seed (echoed in every JSON result).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finetune the toy model's hidden layer with an adapter.
    Train(TrainArgs),
    /// Hyperspherical energy of a weight, optionally against an adapter.
    Energy(EnergyArgs),
    /// Trainable parameter counts for oft, shared oft and low-rank.
    Count(CountArgs),
    /// Analytic vs finite-difference adapter gradients.
    Gradcheck(GradcheckArgs),
    /// Fold an adapter into its base weight.
    Merge(MergeArgs),
    /// Angle vs magnitude feature reconstruction study.
    Fig2(Fig2Args),
    /// Energy drift of oft vs an additive low-rank update.
    Drift(DriftArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Oft,
    Coft,
    #[value(name = "rescaled_oft", alias = "rescaled")]
    Rescaled,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Oft => "oft",
            ModeArg::Coft => "coft",
            ModeArg::Rescaled => "rescaled_oft",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args)]
struct TrainArgs {
    /// Key/value experiment config; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    shared: bool,
    #[arg(long)]
    eps_prime: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Adapter file to write.
    #[arg(long, default_value = "adapter.oftk")]
    out: PathBuf,
    /// Run log CSV; a JSON summary is written next to it.
    #[arg(long, default_value = "run_log.csv")]
    log: PathBuf,
    /// Also write the frozen hidden-layer weight (merged container).
    #[arg(long)]
    w0_out: Option<PathBuf>,
}

#[derive(Args)]
struct EnergyArgs {
    /// Weight file (merged container).
    #[arg(long)]
    w0: PathBuf,
    /// Adapter file; without it the report compares the weight with itself.
    #[arg(long)]
    adapter: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    d: usize,
    /// Number of neurons (defaults to d).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: usize,
    /// Rank of the low-rank comparison (defaults to r).
    #[arg(long)]
    lora_rank: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "oft")]
    mode: ModeArg,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    r: usize,
    #[arg(long)]
    shared: bool,
    #[arg(long)]
    eps_prime: Option<f64>,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    fd_step: f64,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    w0: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Fig2Args {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Write both run logs as CSV with this path prefix.
    #[arg(long)]
    log: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<OftError> for Failure {
    fn from(e: OftError) -> Self {
        let code = match &e {
            OftError::InvalidConfig(_)
            | OftError::IndivisibleBlocks { .. }
            | OftError::NotCoft(_)
            | OftError::Parse(_)
            | OftError::DimensionMismatch { .. }
            | OftError::InvalidShape { .. } => 2,
            OftError::Io { .. } | OftError::Checksum | OftError::Version { .. } | OftError::Corrupt(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = Result<Value, Failure>;

/// Tolerance divisor: 10 under strict precision checking.
fn tolerance_divisor() -> Result<f64, Failure> {
    match std::env::var(PRECISION_ENV) {
        Ok(v) if v == "strict" => Ok(10.0),
        Ok(v) if v.is_empty() || v == "default" => Ok(1.0),
        Ok(v) => Err(config_error(format!("{PRECISION_ENV} must be \"strict\" or \"default\", got {v:?}"))),
        Err(_) => Ok(1.0),
    }
}

/// Emits the JSON result and maps a failed check to exit code 3.
fn finish(mut out: Value, ok: bool, what: &str) -> CmdResult {
    out["pass"] = json!(ok);
    if ok {
        Ok(out)
    } else {
        println!("{out}");
        Err(Failure {
            code: 3,
            message: format!("{what} check failed"),
        })
    }
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> CmdResult {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = m.name().into();
    }
    if let Some(r) = args.r {
        cfg.r = r;
    }
    cfg.shared |= args.shared;
    if args.eps_prime.is_some() {
        cfg.eps_prime = args.eps_prime;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(o) = args.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Adam => "adam".into(),
            OptimizerArg::Sgd => "sgd".into(),
        };
    }
    if let Some(k) = args.log_every {
        cfg.log_every = k;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mode = cfg.adapter_mode()?;
    let tcfg = cfg.train_config()?;
    let tol = ENERGY_TOL / tolerance_divisor()?;

    let spec = ToyTaskSpec::default();
    let adapter = Adapter::new(spec.d_in, spec.hidden, cfg.r, cfg.shared, mode)?;
    let (mut model, _, data) = train::pretrained_toy_model(cfg.seed, &spec)?;
    model.attach_adapter(0, adapter)?;
    eprintln!(
        "training {} adapter (r={}, shared={}) for {} steps, seed {}",
        mode, cfg.r, cfg.shared, cfg.steps, cfg.seed
    );
    let log = train::train(&mut model, &tcfg, &data)?;
    let trained = model.layers()[0].adapter().expect("adapter attached").clone();

    store::save_adapter(&trained, &args.out)?;
    if let Some(p) = &args.w0_out {
        AdapterFile::new(vec![Entry::Merged(model.layers()[0].w0().clone())]).save(p)?;
    }
    log.save_csv(&args.log)?;
    let summary = log.summary(cfg.seed, model.task());
    let summary_path = args.log.with_extension("json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&summary_path, text).map_err(|e| OftError::Io {
        path: summary_path.clone(),
        source: e,
    })?;

    let mut ok = summary.max_he_rel_diff <= tol;
    if let Mode::Coft { eps_prime } = mode {
        ok &= summary.max_q_norm <= eps_prime;
        ok &= summary.max_r_dev <= 2.0 * eps_prime + 10.0 * eps_prime * eps_prime;
    }
    let out = json!({
        "command": "train",
        "seed": cfg.seed,
        "mode": mode.name(),
        "r": cfg.r,
        "shared": cfg.shared,
        "eps_prime": cfg.eps_prime,
        "lr": cfg.lr,
        "steps": cfg.steps,
        "adapter": args.out,
        "log": args.log,
        "summary_file": summary_path,
        "summary": summary,
    });
    finish(out, ok, "training invariant")
}

fn load_weight(path: &Path) -> Result<Mat, Failure> {
    Ok(store::load_merged(path)?)
}

fn cmd_energy(args: &EnergyArgs, seed: u64) -> CmdResult {
    let w0 = load_weight(&args.w0)?;
    let after = match &args.adapter {
        Some(p) => store::load_adapter(p)?.merge(&w0)?,
        None => w0.clone(),
    };
    let report = energy::compare(&w0, &after)?;
    eprintln!(
        "HE before {:.12e}, after {:.12e}, relative change {:.3e}",
        report.he_before, report.he_after, report.rel_diff
    );
    let mut out = serde_json::to_value(report).expect("report serializes");
    out["command"] = json!("energy");
    out["seed"] = json!(seed);
    Ok(out)
}

fn cmd_count(args: &CountArgs, seed: u64) -> CmdResult {
    let n = args.n.unwrap_or(args.d);
    let rank = args.lora_rank.unwrap_or(args.r);
    let oft = param_count(args.d, n, args.r, ParamMethod::Oft)?;
    let shared = param_count(args.d, n, args.r, ParamMethod::OftShared)?;
    let lora = param_count(args.d, n, args.r, ParamMethod::Lora { rank })?;
    eprintln!("method       params");
    eprintln!("oft          {oft}");
    eprintln!("oft_shared   {shared}");
    eprintln!("lora         {lora}");
    Ok(json!({
        "command": "count",
        "seed": seed,
        "d": args.d,
        "n": n,
        "r": args.r,
        "lora_rank": rank,
        "oft": oft,
        "oft_shared": shared,
        "lora": lora,
    }))
}

fn cmd_gradcheck(args: &GradcheckArgs, seed: u64) -> CmdResult {
    let mode = match (args.mode, args.eps_prime) {
        (ModeArg::Coft, Some(eps_prime)) => Mode::Coft { eps_prime },
        (ModeArg::Coft, None) => return Err(config_error("--mode coft requires --eps-prime")),
        (m, Some(_)) => return Err(config_error(format!("--eps-prime is only valid with --mode coft, not {}", m.name()))),
        (ModeArg::Oft, None) => Mode::Oft,
        (ModeArg::Rescaled, None) => Mode::Rescaled,
    };
    let tol = GRAD_TOL / tolerance_divisor()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Adapter::new(args.d, args.n, args.r, args.shared, mode)?;
    let p: Vec<f64> = (0..a.num_params()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    a.set_params(&p)?;
    if let Mode::Coft { .. } = mode {
        a.project_in_place()?;
    }
    let w0 = Mat::from_fn(args.d, args.n, |_, _| rng.gen_range(-1.0..1.0));
    let x = Mat::from_fn(args.d, 5, |_, _| rng.gen_range(-1.0..1.0));
    let target = Mat::from_fn(args.n, 5, |_, _| rng.gen_range(-1.0..1.0));
    let report = grad_check(&a, &w0, &x, &SquaredError::new(target), args.fd_step)?;
    eprintln!(
        "{} params, max relative error {:.3e} at index {} (tolerance {:.0e})",
        report.num_params, report.max_rel_err, report.worst_param_index, tol
    );
    let mut out = serde_json::to_value(report).expect("report serializes");
    out["command"] = json!("gradcheck");
    out["seed"] = json!(seed);
    out["mode"] = json!(mode.name());
    out["tolerance"] = json!(tol);
    let ok = report.max_rel_err <= tol;
    finish(out, ok, "gradient")
}

fn cmd_merge(args: &MergeArgs, seed: u64) -> CmdResult {
    let tol = ENERGY_TOL / tolerance_divisor()?;
    let a = store::load_adapter(&args.adapter)?;
    let w0 = load_weight(&args.w0)?;
    store::export_merged(&a, &w0, &args.out)?;
    let merged = load_weight(&args.out)?;
    let report = energy::compare(&w0, &merged)?;
    eprintln!("merged {} adapter into {}x{} weight", a.mode(), w0.rows(), w0.cols());
    let out = json!({
        "command": "merge",
        "seed": seed,
        "mode": a.mode().name(),
        "d": w0.rows(),
        "n": w0.cols(),
        "out": args.out,
        "he_rel_diff": report.rel_diff,
    });
    finish(out, report.rel_diff <= tol, "energy preservation")
}

fn cmd_fig2(args: &Fig2Args, seed: u64) -> CmdResult {
    let defaults = Fig2Settings::default();
    let settings = Fig2Settings {
        steps: args.steps.unwrap_or(defaults.steps),
        lr: args.lr.unwrap_or(defaults.lr),
        ..defaults
    };
    let r = train::run_fig2(seed, &settings)?;
    eprintln!(
        "reconstruction MSE: inner {:.3e}, angle {:.3e}, magnitude {:.3e}",
        r.mse_inner, r.mse_angle, r.mse_magnitude
    );
    let mut out = serde_json::to_value(r).expect("result serializes");
    out["command"] = json!("fig2");
    out["angle_ratio"] = json!(r.mse_angle / r.mse_magnitude);
    out["ratio_threshold"] = json!(Fig2Result::ANGLE_RATIO);
    out["angle_beats_magnitude"] = json!(r.angle_beats_magnitude());
    out["inner_is_best"] = json!(r.inner_is_best());
    finish(out, r.angle_beats_magnitude() && r.inner_is_best(), "reconstruction ordering")
}

fn cmd_drift(args: &DriftArgs, seed: u64) -> CmdResult {
    let defaults = DriftSettings::default();
    let settings = DriftSettings {
        steps: args.steps.unwrap_or(defaults.steps),
        num_blocks: args.r.unwrap_or(defaults.num_blocks),
        rank: args.lora_rank.unwrap_or(defaults.rank),
        lr: args.lr.unwrap_or(defaults.lr),
        ..defaults
    };
    if settings.rank == 0 {
        return Err(config_error("--lora-rank must be at least 1"));
    }
    let tol = ENERGY_TOL / tolerance_divisor()?;
    let r = train::run_energy_drift(seed, &settings)?;
    if let Some(prefix) = &args.log {
        let with = |tag: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(format!(".{tag}.csv"));
            PathBuf::from(s)
        };
        r.oft.save_csv(&with("oft"))?;
        r.baseline.save_csv(&with("lowrank"))?;
    }
    eprintln!(
        "oft max energy change {:.3e}; low-rank change {:.3e} at step {}",
        r.oft_max_he_rel_diff, r.baseline_he_rel_diff_at_match, r.matched_step
    );
    let ok = r.oft_max_he_rel_diff <= tol && r.baseline_he_rel_diff_at_match > BASELINE_DRIFT_MIN;
    let out = json!({
        "command": "drift",
        "seed": seed,
        "steps": settings.steps,
        "r": settings.num_blocks,
        "lora_rank": settings.rank,
        "lr": settings.lr,
        "oft_final_loss": r.oft_final_loss,
        "baseline_final_loss": r.baseline_final_loss,
        "oft_max_he_rel_diff": r.oft_max_he_rel_diff,
        "matched_step": r.matched_step,
        "baseline_he_rel_diff_at_match": r.baseline_he_rel_diff_at_match,
        "baseline_final_he_rel_diff": r.baseline.last().map(|x| x.he_rel_diff),
    });
    finish(out, ok, "energy drift")
}

fn run(cli: &Cli) -> CmdResult {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Energy(a) => cmd_energy(a, seed),
        Command::Count(a) => cmd_count(a, seed),
        Command::Gradcheck(a) => cmd_gradcheck(a, seed),
        Command::Merge(a) => cmd_merge(a, seed),
        Command::Fig2(a) => cmd_fig2(a, seed),
        Command::Drift(a) => cmd_drift(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
