//! `segcore` command line: synth, train, predict, eval, gradcheck.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arch::{load_checkpoint, ArchitectureSpec, Family};
use crate::data::{self, generate_synthetic, load_image, resize_mask, save_mask, Manifest, MaskMode, Split};
use crate::error::{Result, SegError};
use crate::gradcheck::{check_arch, check_op, run_suite, CaseResult, GRADCHECK_THRESHOLD};
use crate::metrics::{per_class_report, quadratic_kappa_with, write_metrics_csv};
use crate::nn;
use crate::tape::Tape;
use crate::train::{evaluate, train, OptimizerKind, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "segcore", version, about = "Gleason-grade semantic segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and manifest.
    Synth(SynthArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Predict a label mask for one image.
    Predict(PredictArgs),
    /// Evaluate a model on one split of a manifest.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// `key=value` file with defaults for any of these flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_family)]
    arch: Family,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Encoder depth (FCN is always 5).
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, default_value_t = 64)]
    base_filters: usize,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    optimizer: OptimizerKind,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Defaults to the checkpoint path plus `.loss.csv`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    log_interval: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask_out: PathBuf,
    /// Write a color PPM instead of a class-index PGM.
    #[arg(long)]
    palette: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    metrics_out: PathBuf,
    /// Compute kappa over NC..GP5 only.
    #[arg(long)]
    exclude_background: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, conflicts_with = "arch")]
    op: Option<String>,
    #[arg(long, value_parser = parse_family)]
    arch: Option<Family>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

const BOOL_FLAGS: [&str; 2] = ["palette", "exclude-background"];

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: SegError| e.to_string())
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    s.parse().map_err(|e: SegError| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: SegError| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(SegError),
}

impl From<SegError> for Failure {
    fn from(e: SegError) -> Self {
        Failure::Runtime(e)
    }
}

/// Value of `--config` in raw arguments, if any.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn has_flag(args: &[OsString], flag: &str) -> bool {
    let long = format!("--{flag}");
    let eq = format!("--{flag}=");
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == long || s.starts_with(&eq)
    })
}

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SegError::format(format!("config line {}: expected key=value", no + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Appends config-file settings as flags unless the command line already
/// has them.
fn merge_config(mut args: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Runtime(SegError::io(&path, e)))?;
    let pairs = parse_config(&text).map_err(|e| Failure::Usage(e.at_path(&path).to_string()))?;
    let mut extra = Vec::new();
    for (k, v) in pairs {
        if k == "config" || has_flag(&args, &k) {
            continue;
        }
        if BOOL_FLAGS.contains(&k.as_str()) {
            match v.as_str() {
                "true" => extra.push(OsString::from(format!("--{k}"))),
                "false" => {}
                other => {
                    return Err(Failure::Usage(format!(
                        "config key `{k}` expects true or false, got `{other}`"
                    )))
                }
            }
        } else {
            extra.push(OsString::from(format!("--{k}")));
            extra.push(OsString::from(v));
        }
    }
    args.extend(extra);
    Ok(args)
}

fn stderr_line(msg: &str) {
    let _ = writeln!(std::io::stderr(), "{msg}");
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let result = merge_config(args).and_then(|args| match Cli::try_parse_from(&args) {
        Ok(cli) => dispatch(cli.command),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                let _ = e.print();
                Ok(())
            }
            _ => {
                let text = e.to_string();
                let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
                Err(Failure::Usage(first.to_string()))
            }
        },
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            stderr_line(&format!("usage error: {msg}"));
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            stderr_line(&format!("error: {e}"));
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    stderr_line(&format!("config: {cmd:?}"));
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> std::result::Result<(), Failure> {
    let m = generate_synthetic(&a.out, a.count, a.size, a.seed)?;
    stderr_line(&format!("wrote {} samples to {}", m.len(), a.out.display()));
    Ok(())
}

fn default_loss_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn run_train(a: TrainArgs) -> std::result::Result<(), Failure> {
    let mut spec = ArchitectureSpec::new(a.arch)
        .with_base_filters(a.base_filters)
        .with_input_size(a.size);
    if let Some(d) = a.depth {
        spec = spec.with_depth(d);
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest = Manifest::load(&a.manifest)?;
    let samples = manifest.load_samples(Some(Split::Train))?;
    if samples.is_empty() {
        return Err(SegError::InvalidArgument(format!("no train samples in {}", a.manifest.display())).into());
    }
    let loss_log = a.loss_log.unwrap_or_else(|| default_loss_log(&a.out));
    let config = TrainConfig {
        spec,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        optimizer: a.optimizer,
        lr: a.lr,
        max_steps: a.max_steps,
        checkpoint: Some(a.out.clone()),
        loss_log: Some(loss_log.clone()),
        log_interval: a.log_interval,
    };
    let out = train(&config, &samples)?;
    let last = out.history.last().map_or(f64::NAN, |r| r.loss);
    stderr_line(&format!(
        "trained {} steps, final loss {last:.6}; checkpoint {} loss log {}",
        out.history.len(),
        a.out.display(),
        loss_log.display()
    ));
    Ok(())
}

fn predict(a: PredictArgs) -> std::result::Result<(), Failure> {
    let model = load_checkpoint(&a.model)?;
    let image = load_image(&a.image)?;
    let (h, w) = (image.shape().h, image.shape().w);
    let size = model.spec().input_size;
    let input = if (h, w) == (size, size) {
        image
    } else {
        nn::resize_bilinear(&mut Tape::new(), &image, size, size)?
    };
    let labels = model.predict_labels(&input)?;
    let labels = if (h, w) == (size, size) {
        labels
    } else {
        resize_mask(&labels, h, w)?
    };
    let mode = if a.palette { MaskMode::Palette } else { MaskMode::Raw };
    save_mask(&labels, &a.mask_out, mode)?;
    stderr_line(&format!("wrote {}×{} mask to {}", h, w, a.mask_out.display()));
    Ok(())
}

fn eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    let model = load_checkpoint(&a.model)?;
    let manifest = Manifest::load(&a.manifest)?;
    let samples: Vec<data::Sample> = manifest.load_samples(Some(a.split))?;
    if samples.is_empty() {
        return Err(SegError::InvalidArgument(format!(
            "no {} samples in {}",
            a.split,
            a.manifest.display()
        ))
        .into());
    }
    let cm = evaluate(&model, &samples)?;
    let report = per_class_report(&cm)?;
    let kappa = quadratic_kappa_with(&cm, a.exclude_background).ok();
    write_metrics_csv(&a.metrics_out, &report, kappa)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    stderr_line(&format!(
        "{} samples: accuracy {:.4} mean foreground dice {} quadratic kappa {}",
        samples.len(),
        report.accuracy,
        fmt(report.mean_foreground_dice()),
        fmt(kappa)
    ));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    let results = match (&a.op, a.arch) {
        (Some(op), _) => {
            if !crate::gradcheck::OP_CASES.contains(&op.as_str()) {
                return Err(Failure::Usage(format!(
                    "unknown op `{op}` (valid: {})",
                    crate::gradcheck::OP_CASES.join(", ")
                )));
            }
            vec![CaseResult {
                name: op.clone(),
                report: check_op(op, a.seed)?,
            }]
        }
        (None, Some(f)) => vec![CaseResult {
            name: f.name().to_string(),
            report: check_arch(f, a.seed)?,
        }],
        (None, None) => run_suite(a.seed)?,
    };
    let mut out = String::from("case                 max_rel_error  checked  status\n");
    for r in &results {
        out.push_str(&format!(
            "{:<20} {:<14.3e} {:<8} {}\n",
            r.name,
            r.report.max_relative_error,
            r.report.checked,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    print!("{out}");
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(SegError::GradCheckFailed(format!(
            "max relative error above {GRADCHECK_THRESHOLD:e} for {}",
            failed.join(", ")
        ))
        .into())
    }
}
