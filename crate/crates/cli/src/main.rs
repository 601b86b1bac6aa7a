use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tinylab::compute::sci3;
use tinylab::experiment::{self, DataPaths, ExperimentConfig, Overrides};
use tinylab::{Arch, SamplerConfig, Split};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Train, sweep, evaluate and sample small character- and word-level
/// language models.
#[derive(Parser)]
#[command(name = "tinylab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write report.csv, compute.csv and best.ckpt.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the three grid points of an architecture family.
    Sweep {
        /// linear, mlp, attention or transformer.
        family: Arch,
        #[command(flatten)]
        run: RunArgs,
        /// Additional seeds; each grid point is trained once per seed.
        #[arg(long = "extra-seed")]
        extra_seeds: Vec<u64>,
    },
    /// Mean NLL of a checkpoint on one split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Read dataset paths from this config instead of the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sample a continuation from a checkpoint.
    Generate {
        checkpoint: PathBuf,
        #[arg(long, default_value = "HAMLET:")]
        prompt: String,
        /// Number of tokens to sample.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the text to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge the compute.csv rows of several runs, sorted by FLOPs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Small caps and one epoch: 5k training and 1k evaluation positions.
    #[arg(long)]
    fast: bool,
    /// Parent directory of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    overwrite: bool,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            fast: self.fast,
            out_dir: self.out.clone(),
            overwrite: self.overwrite,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { run } => {
            let cfg = run.load()?;
            let out = experiment::cmd_train(&cfg)?;
            let c = &out.compute;
            println!(
                "{}: params {} flops {} best epoch {} val {:.4} test {:.4}",
                cfg.name,
                c.params,
                sci3(c.flops),
                out.report.best_epoch,
                out.report.best_val_nll,
                out.report.test_nll
            );
            if let Some(dir) = out.dir {
                println!("wrote {}", dir.display());
            }
        }
        Command::Sweep {
            family,
            run,
            extra_seeds,
        } => {
            let cfg = run.load()?;
            let mut seeds = vec![cfg.train.seed];
            seeds.extend(extra_seeds);
            let (path, rows) = experiment::cmd_sweep(family, &cfg, &seeds)?;
            for r in &rows {
                println!(
                    "{} {} seed {}: params {} flops {} test {:.4}",
                    r.family,
                    r.setting,
                    r.seed,
                    r.params,
                    sci3(r.flops),
                    r.test_nll
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Eval {
            checkpoint,
            split,
            config,
        } => {
            let paths: Option<DataPaths> = match config {
                Some(p) => Some(ExperimentConfig::from_file(&p)?.paths),
                None => None,
            };
            let nll = experiment::cmd_eval(&checkpoint, split, paths.as_ref())
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("{split} nll {nll:.6}");
        }
        Command::Generate {
            checkpoint,
            prompt,
            n,
            temperature,
            seed,
            out,
        } => {
            let sampler = SamplerConfig {
                n_tokens: n,
                temperature,
                seed,
                prompt,
            };
            let text = experiment::cmd_generate(&checkpoint, &sampler)?;
            println!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Report { runs, out } => {
            let rows = experiment::cmd_report(&runs)?;
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?;
                    experiment::write_report(file, &rows)?;
                }
                None => {
                    let stdout = std::io::stdout();
                    experiment::write_report(stdout.lock(), &rows)?;
                    std::io::stdout().flush()?;
                }
            }
        }
    }
    Ok(())
}
