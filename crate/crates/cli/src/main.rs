use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use skd::data::{denormalize, make_samples, write_pnm, CorpusSpec, Sample, Task};
use skd::gradcheck::run_suite;
use skd::models::{count_params_flops, Cost, ModelConfig};
use skd::trainer::checkpoint::Checkpoint;
use skd::trainer::{
    distill, evaluate, load_samples, save_samples, train_teacher, Dataset, RunConfig, TrainLog,
    TrainOptions, TrainOutcome,
};
use thiserror::Error;

/// File name of the sample container inside a `synth` output directory.
const DATA_FILE: &str = "data.skdc";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] skd::Error),
    #[error("{0}")]
    Failed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "skd",
    version,
    about = "Soft knowledge distillation for toy image restoration"
)]
struct Cli {
    /// Overrides the seed of the config (base_seed for synth, train.seed for training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for synthetic data generation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a degraded corpus: PNM images plus a sample container for `eval`.
    Synth {
        #[arg(long)]
        task: Task,
        /// Corpus spec JSON (count, patch_size, channels, base_seed, degradation knobs).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the teacher on the reconstruction loss.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the per-step training log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Distill the configured student from a frozen teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a `synth` directory and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A `synth` output directory or a sample container file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Count parameters and FLOPs of a model or run config.
    Count {
        #[arg(long)]
        config: PathBuf,
        /// Model (or run) config to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Square input resolution used for FLOPs.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Run the finite-difference gradient suite over every op and loss.
    Gradcheck {
        /// Random instances per case.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Synth { task, spec, out } => synth(task, &spec, &out, cli.seed, threads),
        Command::TrainTeacher {
            config,
            out,
            resume,
            log,
        } => {
            let run = load_run(&config, cli.seed)?;
            let data = Dataset::generate(&run, threads)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let opts = TrainOptions {
                resume: resume.as_ref(),
                stop_at: None,
            };
            finish(train_teacher(&run, &data, opts), &out, log.as_deref())
        }
        Command::Distill {
            config,
            teacher,
            out,
            resume,
            log,
        } => {
            let run = load_run(&config, cli.seed)?;
            let teacher = Checkpoint::load(&teacher)?;
            let data = Dataset::generate(&run, threads)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let opts = TrainOptions {
                resume: resume.as_ref(),
                stop_at: None,
            };
            finish(distill(&run, &teacher, &data, opts), &out, log.as_deref())
        }
        Command::Eval { ckpt, data, report } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let file = if data.is_dir() {
                data.join(DATA_FILE)
            } else {
                data
            };
            let (_, samples) = load_samples(&file)?;
            let json = evaluate(&ckpt, &samples)?.to_json()?;
            fs::write(&report, &json)?;
            print!("{json}");
            Ok(())
        }
        Command::Count {
            config,
            baseline,
            size,
        } => count(&config, baseline.as_deref(), size),
        Command::Gradcheck { trials } => {
            let report = run_suite(trials, cli.seed.unwrap_or(0))?;
            for c in &report.cases {
                let status = if c.failures == 0 { "ok" } else { "FAIL" };
                println!(
                    "{status:<4} {:<36} {:>4} trials  max rel err {:.2e}",
                    c.name, c.trials, c.max_rel_error
                );
            }
            let failed = report.cases.iter().filter(|c| c.failures > 0).count();
            println!(
                "{} cases, {} trials, tolerance {:.0e}: {}",
                report.cases.len(),
                report.total_trials(),
                report.tolerance,
                if failed == 0 {
                    "passed".to_string()
                } else {
                    format!("{failed} failed")
                }
            );
            if failed > 0 {
                return Err(CliError::Failed(format!(
                    "{failed} gradient check cases failed"
                )));
            }
            Ok(())
        }
    }
}

fn load_run(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut run = RunConfig::load(path)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    Ok(run)
}

fn synth(task: Task, spec: &Path, out: &Path, seed: Option<u64>, threads: usize) -> Result<()> {
    let mut spec: CorpusSpec = serde_json::from_str(&fs::read_to_string(spec)?)?;
    if let Some(s) = seed {
        spec.base_seed = s;
    }
    let samples = make_samples(&spec, task, threads)?;
    fs::create_dir_all(out.join("clean"))?;
    fs::create_dir_all(out.join("degraded"))?;
    let ext = if spec.channels == 3 { "ppm" } else { "pgm" };
    for (
        i,
        Sample {
            clean, degraded, ..
        },
    ) in samples.iter().enumerate()
    {
        write_pnm(
            &out.join("clean").join(format!("{i:05}.{ext}")),
            &denormalize(clean)?,
        )?;
        write_pnm(
            &out.join("degraded").join(format!("{i:05}.{ext}")),
            &denormalize(degraded)?,
        )?;
    }
    save_samples(&out.join(DATA_FILE), task, &samples)?;
    println!(
        "wrote {} {task} samples to {}",
        samples.len(),
        out.display()
    );
    Ok(())
}

fn write_log(path: Option<&Path>, log: &TrainLog) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_string_pretty(log)? + "\n")?;
    }
    Ok(())
}

fn finish(result: skd::Result<TrainOutcome>, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let outcome = match result {
        Ok(o) => o,
        Err(skd::Error::Diverged {
            step,
            loss,
            last_good,
        }) => {
            let path = out.with_extension("last-good.skdc");
            last_good.save(&path)?;
            return Err(CliError::Failed(format!(
                "training diverged at step {step} (loss {loss}); last good checkpoint saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.checkpoint.save(out)?;
    write_log(log_path, &outcome.log)?;
    let log = &outcome.log;
    if let (Some(first), Some(last)) = (log.steps.first(), log.steps.last()) {
        println!(
            "steps {}..{}  loss {:.6} -> {:.6}",
            first.step, last.step, first.loss, last.loss
        );
    }
    if let Some(d) = log.degraded {
        println!("degraded input: psnr {:.3} dB  ssim {:.4}", d.psnr, d.ssim);
    }
    for e in &log.evals {
        println!(
            "step {:>6}: psnr {:.3} dB  ssim {:.4}",
            e.step, e.psnr, e.ssim
        );
    }
    println!("saved {}", out.display());
    Ok(())
}

/// A config file holding either a bare model or a full run.
#[derive(Deserialize)]
#[serde(untagged)]
enum CountConfig {
    Run(Box<RunConfig>),
    Model(ModelConfig),
}

fn read_models(path: &Path) -> Result<Vec<(String, ModelConfig)>> {
    let cfg: CountConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(match cfg {
        CountConfig::Model(m) => vec![(path.display().to_string(), m)],
        CountConfig::Run(r) => {
            let mut v = vec![("teacher".to_string(), r.teacher)];
            v.extend(r.student.map(|s| ("student".to_string(), s)));
            v
        }
    })
}

fn count(config: &Path, baseline: Option<&Path>, size: usize) -> Result<()> {
    let mut models = read_models(config)?;
    if let Some(b) = baseline {
        let mut base = read_models(b)?;
        if base.len() != 1 || models.len() != 1 {
            return Err(CliError::Failed(
                "--baseline needs a single model on each side".into(),
            ));
        }
        base[0].0 = format!("baseline {}", base[0].0);
        models.extend(base);
    }
    let costs = models
        .iter()
        .map(|(name, m)| Ok((name.as_str(), count_params_flops(m, size, size)?)))
        .collect::<Result<Vec<(&str, Cost)>>>()?;
    println!(
        "{:<40} {:>14} {:>18}",
        "model",
        "params",
        format!("flops@{size}x{size}")
    );
    for (name, c) in &costs {
        println!("{name:<40} {:>14} {:>18}", c.params, c.flops);
    }
    if let [a, b] = costs.as_slice() {
        let (small, large) = if a.1.params <= b.1.params {
            (a, b)
        } else {
            (b, a)
        };
        let (p, f) = small.1.reduction_vs(&large.1);
        println!(
            "reduction of {} vs {}: params {:.2}%  flops {:.2}%",
            small.0,
            large.0,
            100.0 * p,
            100.0 * f
        );
    }
    Ok(())
}
