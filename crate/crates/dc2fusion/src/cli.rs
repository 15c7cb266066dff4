//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use dc2fusion_core::metrics::{evaluate_sample, EvalMode};
use dc2fusion_core::optim::AdamConfig;
use dc2fusion_core::suite::{gradient_suite, invariant_suite, CheckOutcome};

use crate::checkpoint::load_checkpoint;
use crate::config::load_run_file;
use crate::dataset::generate_dataset;
use crate::error::{Error, Result};
use crate::report::{report_rows, save_report};
use crate::train::{train, TrainConfig};
use crate::vol3::{load_volume, save_volume};

#[derive(Parser, Debug)]
#[command(
    name = "dc2fusion",
    version,
    about = "3D MRI/PET fusion with deformable window cross-attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset of phantom pairs split 0.8/0.1/0.1.
    GenData(GenDataArgs),
    /// Train a model on the `train` split of a dataset.
    Train(TrainArgs),
    /// Fuse one MRI/PET pair with a trained checkpoint.
    Fuse(FuseArgs),
    /// Score a fused volume against its sources and write a CSV report.
    Eval(EvalArgs),
    /// Compare every backward rule with central differences (64-bit).
    Gradcheck(CheckArgs),
    /// Gradient checks plus structural and numerical invariants.
    Selftest(CheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pairs (at least 10).
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Edge length of the cubic volumes (at least 16).
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..=100))]
    pub epochs: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// key = value file with model fields and `lr`; flags given explicitly win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Attention heads per level.
    #[arg(long, default_value = "3,6,12,24")]
    pub heads: String,
    /// Attention window.
    #[arg(long, default_value = "2,2,2")]
    pub window: String,
    /// Channels at the finest level.
    #[arg(long, default_value_t = 24)]
    pub base_embed: usize,
    /// Patch-embedding size.
    #[arg(long, default_value_t = 2)]
    pub patch: usize,
    /// Loss log path [default: <out>.loss.csv].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Steps between checkpoints (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_interval: u64,
    /// Disable random cube-rotation augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub mri: PathBuf,
    #[arg(long)]
    pub pet: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Slice2d,
    Volume3d,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub mri: PathBuf,
    #[arg(long)]
    pub pet: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Slice2d)]
    pub mode: ModeArg,
    /// Axial slice for slice2d [default: middle].
    #[arg(long)]
    pub slice: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Adds a check whose backward rule is wrong on purpose.
    #[arg(long, hide = true)]
    pub corrupt_rule: bool,
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn usage(e: dc2fusion_core::Error) -> Error {
    Error::Usage(e.to_string())
}

fn train_config(a: &TrainArgs, m: &ArgMatches) -> Result<TrainConfig> {
    let file = a.config.as_deref().map(load_run_file).transpose()?;
    let mut model = file.as_ref().map(|f| f.model.clone()).unwrap_or_default();
    let mut lr = file.as_ref().and_then(|f| f.lr).unwrap_or(a.lr);
    if file.is_none() || explicit(m, "heads") {
        model.set("heads", &a.heads).map_err(usage)?;
    }
    if file.is_none() || explicit(m, "window") {
        model.set("window", &a.window).map_err(usage)?;
    }
    if file.is_none() || explicit(m, "base_embed") {
        model.base_embed = a.base_embed;
    }
    if file.is_none() || explicit(m, "patch") {
        model.patch = a.patch;
    }
    if explicit(m, "lr") {
        lr = a.lr;
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
    }
    model.validate().map_err(usage)?;
    let log = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let mut cfg = TrainConfig::new(&a.out, &log);
    cfg.model = model;
    cfg.adam = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    cfg.epochs = a.epochs;
    cfg.seed = a.seed;
    cfg.augment = !a.no_augment;
    cfg.checkpoint_interval = a.checkpoint_interval;
    cfg.resume = a.resume.clone();
    Ok(cfg)
}

fn braces(v: &[usize]) -> String {
    let parts: Vec<String> = v.iter().map(usize::to_string).collect();
    format!("{{{}}}", parts.join(","))
}

fn run_train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let cfg = train_config(a, m)?;
    println!(
        "train: window {}, heads {}, lr {:e}, batch 1, epochs {}, seed {}, augment {}",
        braces(&cfg.model.window),
        braces(&cfg.model.heads),
        cfg.adam.lr,
        cfg.epochs,
        cfg.seed,
        if cfg.augment { "on" } else { "off" }
    );
    let t0 = Instant::now();
    let s = train(&a.data, &cfg)?;
    println!(
        "trained {} steps in {:.1}s; loss {:.5} -> {:.5}; checkpoint {}; log {}",
        s.steps,
        t0.elapsed().as_secs_f64(),
        s.first_loss.unwrap_or(f64::NAN),
        s.last_loss.unwrap_or(f64::NAN),
        cfg.checkpoint.display(),
        cfg.log.display()
    );
    if let Some(v) = &s.validation {
        println!(
            "validation mean total loss {:.5} over {} samples",
            v.mean.total,
            v.losses.len()
        );
    }
    Ok(())
}

fn run_fuse(a: &FuseArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let net = ck.network()?;
    let mri = load_volume(&a.mri)?;
    let pet = load_volume(&a.pet)?;
    if mri.shape() != pet.shape() {
        return Err(Error::ShapeMismatch(format!(
            "MRI {:?} vs PET {:?}",
            mri.shape(),
            pet.shape()
        )));
    }
    let dims = mri.spatial()?;
    ck.config
        .check_input(dims)
        .map_err(|e| Error::ShapeMismatch(format!("volume {dims:?} does not fit the checkpoint model: {e}")))?;
    let fused = net.infer(&ck.params, &mri, &pet)?;
    save_volume(&a.out, &fused)?;
    println!("fused {:?} -> {}", dims, a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let fused = load_volume(&a.fused)?;
    let mri = load_volume(&a.mri)?;
    let pet = load_volume(&a.pet)?;
    for (name, v) in [("MRI", &mri), ("PET", &pet)] {
        if v.shape() != fused.shape() {
            return Err(Error::ShapeMismatch(format!(
                "fused {:?} vs {name} {:?}",
                fused.shape(),
                v.shape()
            )));
        }
    }
    let mode = match (a.mode, a.slice) {
        (ModeArg::Slice2d, s) => EvalMode::Slice2d(s),
        (ModeArg::Volume3d, None) => EvalMode::Volume3d,
        (ModeArg::Volume3d, Some(_)) => return Err(Error::Usage("--slice only applies to --mode slice2d".into())),
    };
    let sample = a
        .fused
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fused".into());
    let report = evaluate_sample(&sample, &fused, &mri, &pet, mode)?;
    save_report(&a.out, &report_rows(std::slice::from_ref(&report)))?;
    let at = report.slice.map(|z| format!(" (slice {z})")).unwrap_or_default();
    println!("{sample} {}{at}", mode.label());
    println!("{:<6} {:>12} {:>12} {:>12}", "metric", "vs_mri", "vs_pet", "mean");
    for s in &report.scores {
        println!(
            "{:<6} {:>12.6} {:>12.6} {:>12.6}",
            s.metric.name(),
            s.vs_mri,
            s.vs_pet,
            s.mean
        );
    }
    Ok(())
}

fn print_checks(title: &str, checks: &[CheckOutcome]) {
    println!("{title}");
    println!("  {:<32} {:>11} {:>9}  result", "check", "value", "limit");
    for c in checks {
        println!(
            "  {:<32} {:>11.3e} {:>9.0e}  {}",
            c.name,
            c.value,
            c.tolerance,
            if c.passed { "pass" } else { "FAIL" }
        );
        if !c.passed {
            println!("      {}", c.detail);
        }
    }
}

fn run_checks(a: &CheckArgs, with_invariants: bool) -> Result<()> {
    let t0 = Instant::now();
    let mut all = gradient_suite(a.corrupt_rule);
    print_checks("gradient checks (f64, central differences, eps 1e-4)", &all);
    if with_invariants {
        let inv = invariant_suite();
        print_checks("invariants", &inv);
        all.extend(inv);
    }
    let failed = all.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {} failed, {:.1}s",
        all.len(),
        failed,
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::ChecksFailed {
            failed,
            total: all.len(),
        });
    }
    Ok(())
}

fn run_gen_data(a: &GenDataArgs) -> Result<()> {
    let entries = generate_dataset(&a.out, a.count, a.size, a.seed)?;
    let count = |s| entries.iter().filter(|e| e.split == s).count();
    use crate::dataset::Split;
    println!(
        "wrote {} pairs of {}^3 to {} (train {}, val {}, test {})",
        entries.len(),
        a.size,
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

pub fn execute(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => run_gen_data(a),
        Command::Train(a) => {
            let sub = matches.subcommand_matches("train").expect("train subcommand matches");
            run_train(a, sub)
        }
        Command::Fuse(a) => run_fuse(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_checks(a, false),
        Command::Selftest(a) => run_checks(a, true),
    }
}

fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand {
                    2
                } else {
                    0
                };
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return 2;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error[usage]: {}", one_line(&e.to_string()));
            return 2;
        }
    };
    match execute(&cli, &matches) {
        Ok(()) => 0,
        Err(e) => {
            let kind = e.kind();
            eprintln!("error[{}]: {}", kind.label(), one_line(&e.to_string()));
            kind.exit_code()
        }
    }
}

/// Default path of the loss log written next to a checkpoint.
pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".loss.csv");
    PathBuf::from(p)
}
