//! The `pcs` command-line tool.
//!
//! Exit codes: 0 success, 1 configuration or data error, 2 training
//! divergence, 3 failed gradient verification.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{parse_config, RunConfig, TRAIN_KEYS};

use crate::csmodel::{load_params, load_params_for, weights, PadPolicy};
use crate::error::{Error, Result};
use crate::losses::{canonical_tap, load_extractor, ExtractorSource};
use crate::metrics::{evaluate, format_value, EvalOptions, Metric, MetricReport};
use crate::netpbm;
use crate::tensorcore::{Fault, OpKind};
use crate::trainer::{latest_checkpoint, load_checkpoint, TrainState, Trainer};
use crate::verify::{op_names, run_suite, Precision, SuiteOptions};

#[derive(Debug, Parser)]
#[command(name = "pcs", version, about = "Full-image compressive sensing: train, recover, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a sensing/recovery network. Writes ckpt-NNNNNNNN.pcsw files and
    /// loss.log (`iter<TAB>mean loss<TAB>wallclock_ms`) into the output dir.
    Train(TrainArgs),
    /// Measure and recover one PGM/PPM image.
    Recover(RecoverArgs),
    /// Score reconstructions of every PGM/PPM image in a directory.
    ///
    /// TSV output: header, one row per image (sorted by name), then a `mean`
    /// row. JSONL output: one object per image with `name`, the selected
    /// metrics and `ssim_variant`; with --compare each object also carries
    /// `model`. PSNR of identical images is written as "inf".
    Eval(EvalArgs),
    /// Check every backward rule against finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump extractor features of an image, or save an extractor's weights.
    Features(FeaturesArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named hyperparameter set (paper-mr1-vgg22, paper-mr1-vgg34, paper-mr4-vgg22, paper-mr4-vgg34).
    #[arg(long)]
    pub preset: Option<String>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory of PGM/PPM training images.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of SGD steps.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Side of the square training crops, in pixels.
    #[arg(long)]
    pub crop_size: Option<usize>,
    /// Checkpoint and log interval, in iterations.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// `pixel` or `perceptual`.
    #[arg(long)]
    pub loss: Option<String>,
    /// Feature tap for the perceptual loss (pool2, pool3, vgg2_2, vgg3_4, ...).
    #[arg(long)]
    pub tap: Option<String>,
    /// Extractor weights file, or `random:seed=S,depth=D,width=W`.
    #[arg(long)]
    pub extractor: Option<String>,
    /// Start from these weights (a model or checkpoint file) at iteration 0.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue a checkpoint; `latest` picks the newest one in the output dir.
    #[arg(long)]
    pub resume: Option<String>,
    /// Any other configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    /// Model or checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// `reflect-pad-then-crop` or `error`.
    #[arg(long, default_value = "reflect-pad-then-crop")]
    pub pad_policy: PadPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Tsv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model or checkpoint file.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of reference PGM/PPM images.
    #[arg(long)]
    pub data: PathBuf,
    /// Second model; prints both models' means side by side.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Comma-separated subset of psnr,ssim,blockiness.
    #[arg(long, default_value = "psnr,ssim,blockiness")]
    pub metrics: String,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: ReportFormat,
    /// Signal peak for PSNR and SSIM (images are scaled to [0, 1]).
    #[arg(long, default_value_t = 1.0)]
    pub peak: f64,
    #[arg(long, default_value = "reflect-pad-then-crop")]
    pub pad_policy: PadPolicy,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run the backward pass in f64 with the tighter tolerance.
    #[arg(long)]
    pub double: bool,
    /// Scale the gradient one op emits, to confirm the suite catches it.
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
    /// Gradient multiplier used by --inject-fault.
    #[arg(long, default_value_t = 1.1)]
    pub fault_factor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Extractor weights file, or `random:seed=S,depth=D,width=W`.
    #[arg(long)]
    pub extractor: String,
    #[arg(long, default_value = "pool2")]
    pub tap: String,
    /// Image whose features are dumped (converted to luma).
    #[arg(long, requires = "output")]
    pub input: Option<PathBuf>,
    /// Feature file (.pcsw with one record `features.<tap>`).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write the extractor's weights to this .pcsw file.
    #[arg(long)]
    pub save_extractor: Option<PathBuf>,
}

/// Parses `args` and runs the command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Recover(a) => cmd_recover(a),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Features(a) => cmd_features(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(e).in_file(path)
}

fn train_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = &a.config {
        rc.load_file(p)?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags = [
        ("preset", a.preset.clone()),
        ("out_dir", path(&a.out)),
        ("dataset_dir", path(&a.dataset)),
        ("iterations", a.iterations.map(|v| v.to_string())),
        ("learning_rate", a.learning_rate.map(|v| v.to_string())),
        ("momentum", a.momentum.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("crop_size", a.crop_size.map(|v| v.to_string())),
        ("checkpoint_every", a.checkpoint_every.map(|v| v.to_string())),
        ("loss", a.loss.clone()),
        ("tap", a.tap.clone()),
        ("extractor", a.extractor.clone()),
        ("init", path(&a.init)),
        ("resume", a.resume.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            rc.set(k, v, "flag")?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        rc.set(k.trim(), v.trim(), "flag")?;
    }
    Ok(rc)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let rc = train_run_config(&a)?;
    let config = rc.train_config()?;
    let out_dir = PathBuf::from(rc.get("out_dir").unwrap_or("runs/train"));
    for line in rc.echo() {
        log::info!("{line}");
    }
    log::info!("effective: {config:?}");
    log::info!("measurement rate: {}", config.model.rate_summary());
    if config.model.mr_gap() > 0.005 {
        log::warn!("achieved measurement rate differs from the target by more than 0.5%");
    }

    let mut trainer = match (rc.get("resume"), rc.get("init")) {
        (Some(_), Some(_)) => return Err(Error::config("'resume' and 'init' are mutually exclusive")),
        (Some(r), None) => {
            let ckpt = if r == "latest" {
                latest_checkpoint(&out_dir)
                    .ok_or_else(|| Error::Data(format!("no checkpoint in {}", out_dir.display())))?
            } else {
                PathBuf::from(r)
            };
            log::info!("resuming from {}", ckpt.display());
            Trainer::resume(config, ckpt)?
        }
        (None, Some(init)) => {
            let params = match load_checkpoint(init, &config.model) {
                Ok(state) => state.params,
                Err(_) => load_params_for(init, &config.model)?,
            };
            log::info!("initialising from {init}");
            let dataset = crate::trainer::Dataset::load(&config.dataset_dir, config.crop_size)?;
            Trainer::with_parts(config, dataset, TrainState::new(params))?
        }
        (None, None) => Trainer::new(config)?,
    };
    trainer.run(Some(&out_dir), |p| {
        log::info!("iter {} loss {} ({} ms)", p.iteration, p.mean_loss, p.wallclock_ms);
    })?;
    let st = trainer.state();
    writeln!(
        out,
        "trained to iteration {} (running loss {}); checkpoints in {}",
        st.iteration,
        st.running_loss,
        out_dir.display()
    )?;
    Ok(())
}

fn cmd_recover(a: RecoverArgs) -> Result<()> {
    let params = load_params::<f32>(&a.model)?;
    let image = netpbm::read_image::<f32>(&a.input)?;
    let s = image.shape();
    let stride = params.config().measurement_stride;
    if s.h % stride != 0 || s.w % stride != 0 {
        log::info!("{}x{} is not a multiple of {stride}; policy {}", s.w, s.h, a.pad_policy);
    }
    let recon = params.reconstruct_image(&image, a.pad_policy)?;
    netpbm::write_image(&recon, &a.output)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let metrics = Metric::parse_list(&a.metrics)?;
    if metrics.is_empty() {
        return Err(Error::config("--metrics selects no metric"));
    }
    let opts = EvalOptions {
        peak: a.peak,
        pad_policy: a.pad_policy,
    };
    let report = evaluate(&load_params::<f32>(&a.model)?, &a.data, &opts)?;
    let text = match &a.compare {
        None => match a.format {
            ReportFormat::Tsv => report.to_tsv(&metrics),
            ReportFormat::Jsonl => report.to_jsonl(&metrics),
        },
        Some(other) => {
            let second = evaluate(&load_params::<f32>(other)?, &a.data, &opts)?;
            compare_text(&a, &metrics, &report, &second)
        }
    };
    match &a.output {
        Some(p) => std::fs::write(p, text).map_err(io_err(p))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn compare_text(a: &EvalArgs, metrics: &[Metric], first: &MetricReport, second: &MetricReport) -> String {
    let names = [a.model.display().to_string(), a.compare.as_ref().map(|p| p.display().to_string()).unwrap_or_default()];
    match a.format {
        ReportFormat::Tsv => {
            let mut s = format!("metric\t{}\t{}\n", names[0], names[1]);
            for &m in metrics {
                let (label, x, y) = match m {
                    Metric::Psnr => ("mean_psnr_db", first.mean_psnr_db, second.mean_psnr_db),
                    Metric::Ssim => ("mean_ssim", first.mean_ssim, second.mean_ssim),
                    Metric::Blockiness => ("mean_blockiness", first.mean_blockiness, second.mean_blockiness),
                };
                s.push_str(&format!("{label}\t{}\t{}\n", format_value(x), format_value(y)));
            }
            s
        }
        ReportFormat::Jsonl => {
            let mut s = String::new();
            for (name, r) in names.iter().zip([first, second]) {
                for line in r.to_jsonl(metrics).lines() {
                    let mut v: serde_json::Value = serde_json::from_str(line).expect("own output");
                    v["model"] = serde_json::json!(name);
                    s.push_str(&v.to_string());
                    s.push('\n');
                }
            }
            s
        }
    }
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let fault = a
        .inject_fault
        .as_deref()
        .map(|name| {
            OpKind::from_name(name)
                .map(|op| Fault {
                    op,
                    factor: a.fault_factor,
                })
                .ok_or_else(|| {
                    Error::config(format!(
                        "unknown op '{name}' (known: {})",
                        op_names(&OpKind::ALL)
                    ))
                })
        })
        .transpose()?;
    let opts = SuiteOptions {
        precision: if a.double { Precision::Double } else { Precision::Single },
        seed: a.seed,
        fault,
    };
    let report = run_suite(&opts)?;
    for c in &report.checks {
        writeln!(
            out,
            "{}\t{}\t{:.3e}\t{:.0e}",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.max_relative_error,
            c.tolerance
        )?;
    }
    if let Some(w) = report.worst() {
        writeln!(out, "worst: {} ({:.3e})", w.name, w.max_relative_error)?;
    }
    report.into_result().map(|_| ())
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let source: ExtractorSource = a.extractor.parse()?;
    let extractor = load_extractor::<f32>(&source)?;
    if a.input.is_none() && a.save_extractor.is_none() {
        return Err(Error::config("nothing to do: pass --input/--output or --save-extractor"));
    }
    if let Some(p) = &a.save_extractor {
        extractor.save(p)?;
    }
    if let (Some(input), Some(output)) = (&a.input, &a.output) {
        let tap = canonical_tap(&a.tap);
        let image = netpbm::to_luma(&netpbm::read_image::<f32>(input)?)?;
        let feats = extractor.extract(&image, &tap)?;
        let record = weights::Record::from_tensor(format!("features.{tap}"), &feats)?;
        weights::write_file(output, &[record])?;
        log::info!("{tap} features {} written to {}", feats.shape(), output.display());
    }
    Ok(())
}

/// Process entry point: runs the command line and maps errors to exit codes.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
