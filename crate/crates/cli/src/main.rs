mod export;
mod failure;
mod io;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use overlap_gan::checkpoint::CheckpointKind;
use overlap_gan::data::{build_ring_overlap, build_two_gaussian_toy, parse_class};
use overlap_gan::eval::{evaluate, posterior_matrix_bayes, posterior_matrix_classifier, posterior_matrix_pgan, EvalSettings};
use overlap_gan::tensor::NamedRng;
use overlap_gan::trainer::{ablation_grid, load_pgan, train_pgan, AxisSpec, FrozenClassifier, Trainer};

use crate::export::ExportSettings;
use crate::failure::{training, Classify, CliResult, Code};

#[derive(Parser)]
#[command(name = "overlap-gan", version, about = "Class-overlap GAN experiments on Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a conditional GAN from a JSON config.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Train a posterior GAN on the classifier of a trained checkpoint.
    TrainPgan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_per_state: usize,
        #[arg(long, default_value_t = 10_000)]
        n_global: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `name` or `name=v1,v2,...`; repeat for a product grid.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to OVERLAP_GAN_THREADS or the core count.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Interpolate the condition between two classes.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-by-class mean posterior as CSV.
    PosteriorMatrix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        source: Option<Source>,
        /// Samples per class.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a labeled dataset to CSV.
    ExportDataset {
        /// `toy`, `10to5` or `7to3`.
        #[arg(long, conflicts_with = "config")]
        dataset: Option<String>,
        /// Take the dataset from a train config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write scatter, posterior-matrix, interpolation and loss CSVs for a run.
    ExportPlots {
        #[arg(long)]
        run: PathBuf,
        /// Real and generated points per condition state.
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every stage of an experiment manifest.
    Run {
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    #[value(alias = "real")]
    Classifier,
    Bayes,
    Pgan,
}

fn threads(flag: Option<usize>) -> anyhow::Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("OVERLAP_GAN_THREADS") {
        Ok(v) => v.parse().with_context(|| format!("OVERLAP_GAN_THREADS={v:?} is not a count")),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn class_arg(name: &str, c: usize) -> anyhow::Result<usize> {
    parse_class(name)
        .filter(|&k| k < c)
        .ok_or_else(|| anyhow!("unknown class {name:?} for {c} classes"))
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).code(Code::Runtime)?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => {
            let mut t = match (resume, config) {
                (Some(ckpt), _) => io::load_trainer(&ckpt, Code::Config)?,
                (None, Some(path)) => Trainer::new(io::load_config(&path, seed)?).map_err(training)?,
                (None, None) => unreachable!("clap requires --config or --resume"),
            };
            let record = t.run(Some(&out)).map_err(training)?;
            print_json(&record.eval_rows.last())
        }
        Command::TrainPgan {
            config,
            classifier,
            out,
            seed,
        } => {
            let pcfg = io::load_pgan_config(&config, seed)?;
            let source = io::load_trainer(&classifier, Code::Config)?;
            let (_, record) = train_pgan(&pcfg, FrozenClassifier::from_trainer(&source), Some(&out)).map_err(training)?;
            io::write_json(&out.join("pgan_record.json"), &record).code(Code::Runtime)?;
            print_json(&record.eval_rows.last())
        }
        Command::Eval {
            checkpoint,
            n_per_state,
            n_global,
            seed,
            out,
        } => {
            let t = io::load_trainer(&checkpoint, Code::Eval)?;
            let settings = EvalSettings { n_per_state, n_global };
            let mut rng = NamedRng::new(seed, "cli-eval");
            let report = evaluate(t.config().variant, &t.generator, &t.disc, t.dataset(), &settings, &mut rng)
                .context("evaluation failed")
                .code(Code::Eval)?;
            match out {
                Some(path) => io::write_json(&path, &report).code(Code::Eval),
                None => print_json(&report),
            }
        }
        Command::Ablate {
            config,
            axes,
            out,
            seed,
            threads: n,
        } => {
            let base = io::load_config(&config, seed)?;
            let axes: Vec<AxisSpec> = axes
                .iter()
                .map(|a| a.parse::<AxisSpec>())
                .collect::<Result<_, _>>()
                .map_err(training)?;
            let n = threads(n).code(Code::Config)?;
            let table = ablation_grid(&base, &axes, Some(&out), n).map_err(training)?;
            eprintln!("{} cells written to {}", table.len(), out.join("ablation.csv").display());
            Ok(())
        }
        Command::Interpolate {
            checkpoint,
            from,
            to,
            steps,
            draws,
            seed,
            out,
        } => {
            let t = io::load_trainer(&checkpoint, Code::Config)?;
            let c = t.dataset().num_classes();
            let a = class_arg(&from, c).code(Code::Config)?;
            let b = class_arg(&to, c).code(Code::Config)?;
            let settings = ExportSettings {
                steps,
                draws,
                seed,
                ..ExportSettings::default()
            };
            export::interpolation_trace(&t.generator, t.dataset(), a, b, &settings, &out).code(Code::Eval)
        }
        Command::PosteriorMatrix {
            checkpoint,
            source,
            n,
            seed,
            out,
        } => {
            let ckpt = io::load_checkpoint(&checkpoint, Code::Config)?;
            let mut rng = NamedRng::new(seed, "cli-posterior");
            let matrix = match (ckpt.kind, source) {
                (CheckpointKind::Pgan, None | Some(Source::Pgan)) => {
                    let nets = load_pgan(&ckpt).code(Code::Config)?;
                    posterior_matrix_pgan(&nets, n, &mut rng)
                }
                (CheckpointKind::Pgan, Some(s)) => {
                    return Err(anyhow!("a posterior GAN checkpoint only supports --source pgan, got {s:?}"))
                        .code(Code::Config)
                }
                (CheckpointKind::Gan, Some(Source::Pgan)) => {
                    return Err(anyhow!("--source pgan needs a posterior GAN checkpoint")).code(Code::Config)
                }
                (CheckpointKind::Gan, s) => {
                    let t = Trainer::from_checkpoint(&ckpt).code(Code::Config)?;
                    let total = n * t.dataset().num_classes();
                    match s {
                        Some(Source::Bayes) => posterior_matrix_bayes(t.dataset(), total, &mut rng),
                        _ if t.disc.c_head.is_none() => {
                            return Err(anyhow!("{} has no classifier; use --source bayes", t.config().variant))
                                .code(Code::Config)
                        }
                        _ => posterior_matrix_classifier(&t.disc, t.dataset(), total, &mut rng),
                    }
                }
            }
            .code(Code::Eval)?;
            io::write_with(&out, |w| matrix.write_csv(w)).code(Code::Runtime)
        }
        Command::ExportDataset {
            dataset,
            config,
            n,
            seed,
            out,
        } => {
            let ds = match (dataset.as_deref(), config) {
                (_, Some(path)) => io::load_config(&path, None)?.dataset.build().map_err(training)?,
                (Some("toy"), None) => build_two_gaussian_toy(),
                (Some(scheme @ ("10to5" | "7to3")), None) => {
                    let k = if scheme == "10to5" { 10 } else { 7 };
                    build_ring_overlap(k, scheme).map_err(training)?
                }
                (Some(other), None) => return Err(anyhow!("unknown dataset {other:?}")).code(Code::Config),
                (None, None) => return Err(anyhow!("give --dataset or --config")).code(Code::Config),
            };
            let mut rng = NamedRng::new(seed, "cli-dataset");
            let batch = ds.sample_batch(n, &mut rng).map_err(training)?;
            io::write_with(&out, |w| ds.write_csv(&batch, w)).code(Code::Runtime)
        }
        Command::ExportPlots { run, samples, seed } => {
            let settings = ExportSettings {
                samples,
                seed,
                ..ExportSettings::default()
            };
            for f in export::export_plots(&run, &settings)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Run { manifest: path, seed } => {
            let summary = manifest::run_experiment(&path, seed)?;
            eprintln!(
                "{}: {} stages run, {} up to date",
                display_name(&path),
                summary.executed.len(),
                summary.skipped.len()
            );
            Ok(())
        }
    }
}

fn display_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
