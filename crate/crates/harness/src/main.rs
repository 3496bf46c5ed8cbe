use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use cdkd_core::synth::{write_dump, Split};
use cdkd_harness::checkpoint::Checkpoint;
use cdkd_harness::config::RunConfig;
use cdkd_harness::eval::evaluate;
use cdkd_harness::gradsuite::{run_suite, GRAD_TOL};
use cdkd_harness::report::emit_report;
use cdkd_harness::selftest::{run_selftest, scratch_dir};
use cdkd_harness::train::{build_data, train_student, train_teacher, CONFIG_FILE};
use cdkd_harness::HarnessError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cdkd", version, about = "Cross-resolution keypoint distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set optim.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and val splits as binary dumps into paths.out_dir.
    GenData(ConfigArgs),
    /// Train the high-resolution teacher.
    TrainTeacher(ConfigArgs),
    /// Train a student; distills when paths.teacher is set.
    TrainStudent(ConfigArgs),
    /// Report PCK of a checkpoint at several thresholds.
    ///
    /// Without --config the checkpoint's own configuration is the base.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write summary.txt and SVG curves for a run directory.
    Report { run_dir: PathBuf },
    /// Finite-difference check of every primitive and loss.
    GradCheck,
    /// Gradients plus a miniature end-to-end run.
    Selftest,
}

fn read_config_file(args: &ConfigArgs) -> anyhow::Result<Option<String>> {
    args.config
        .as_ref()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn resolve(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::resolve(read_config_file(args)?.as_deref(), &args.overrides)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::GenData(args) => {
            let cfg = resolve(&args)?;
            let (train, val) = build_data(&cfg)?;
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.echo())?;
            for (name, ds) in [("train.bin", &train), ("val.bin", &val)] {
                let path = cfg.out_dir.join(name);
                let mut sink = BufWriter::new(File::create(&path)?);
                write_dump(ds, &mut sink).map_err(HarnessError::from)?;
                println!("wrote {} samples to {}", ds.len(), path.display());
            }
        }
        Command::TrainTeacher(args) => {
            let cfg = resolve(&args)?;
            let out = train_teacher(&cfg)?;
            println!("best val pck {:?} in {:.1}s", out.best_pck, started.elapsed().as_secs_f64());
        }
        Command::TrainStudent(args) => {
            let cfg = resolve(&args)?;
            let teacher = cfg.teacher.as_deref().map(Checkpoint::load).transpose()?;
            let out = train_student(&cfg, teacher.as_ref())?;
            println!("best val pck {:?} in {:.1}s", out.best_pck, started.elapsed().as_secs_f64());
        }
        Command::Eval {
            checkpoint,
            split,
            config,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let text = match read_config_file(&config)? {
                Some(text) => text,
                None => ckpt.config.clone(),
            };
            let cfg = RunConfig::resolve(Some(&text), &config.overrides)?;
            print!("{}", evaluate(&ckpt, split.into(), &cfg)?);
        }
        Command::Report { run_dir } => {
            let report = emit_report(&run_dir)?;
            print!("{}", report.summary);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
        }
        Command::GradCheck => {
            let report = run_suite()?;
            for name in report.names() {
                let worst = report.cases.iter().filter(|c| c.name == name).map(|c| c.error).fold(0.0, f64::max);
                let verdict = if worst < GRAD_TOL { "ok" } else { "FAIL" };
                println!("{name:<28} max error {worst:.2e}  {verdict}");
            }
            if !report.passed() {
                bail!("{} gradient cases exceed {GRAD_TOL:e}", report.failures().count());
            }
        }
        Command::Selftest => {
            let scratch = scratch_dir();
            let checks = run_selftest(&scratch);
            // Scratch files are only useful while the checks run.
            let _ = fs::remove_dir_all(&scratch);
            let checks = checks?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                bail!("selftest failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
