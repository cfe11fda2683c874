use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neuroface::aubridge::{read_au_csv, AuFrame};
use neuroface::datagen::{generate_dataset, read_dataset, write_dataset_csv};
use neuroface::nn::{init_mlp, load_model, save_model};
use neuroface::pipeline::{
    benchmark, evaluate_transfer, evaluation_csv, export_animation, input_table, sha256_hex, simulate, trajectory_csv,
    transfer_sequence, ModelBundle, Models, Normalization, RunConfig, RunInfo,
};
use neuroface::{Error, ErrorKind, Result};

/// Face, head and neck simulation with AU-driven expression transfer.
#[derive(Parser)]
#[command(name = "neuroface", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply to anything not set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic AU/activation dataset.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_per_expression: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the AU-to-activation network on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the per-epoch training MSE here.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Transfer an AU/head-pose CSV onto the face and export the animation.
    Transfer {
        #[command(flatten)]
        io: TransferArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer, re-estimate AUs and report the per-AU MSE.
    Eval {
        #[command(flatten)]
        io: TransferArgs,
        /// Use the raw AUs of a dataset file as the input frames instead
        /// (normalized with the model's training table).
        #[arg(long, conflicts_with = "input")]
        dataset: Option<PathBuf>,
        /// Evaluate only the first N frames.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Free-run the neck through the configured keyframes.
    Simulate {
        #[arg(long)]
        duration: Option<f64>,
        /// Drive the muscles with the keyframe activations, no controller.
        #[arg(long)]
        open_loop: bool,
        /// Write the trajectory CSV here (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Measure physics steps per second instead.
        #[arg(long)]
        benchmark: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Rewrite the bundled model data files into a directory.
    Bundle {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    model: PathBuf,
    /// AU CSV in the external tool's layout.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_parser = parse_normalization)]
    normalization: Option<Normalization>,
    /// Simulated neck time per frame, s.
    #[arg(long)]
    neck_time: Option<f64>,
}

fn parse_normalization(s: &str) -> std::result::Result<Normalization, String> {
    match s {
        "sequence" => Ok(Normalization::Sequence),
        "training" => Ok(Normalization::Training),
        _ => Err(format!("expected `sequence` or `training`, got {s:?}")),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 1,
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Convergence => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = ["warn", "info", "debug"][usize::from(cli.verbose.min(2))];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Datagen {
            out,
            n_per_expression,
            seed,
        } => {
            if let Some(n) = n_per_expression {
                config.datagen.n_per_expression = n;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            config.validate()?;
            let models = Models::load(&config.model)?;
            let d = generate_dataset(
                &models.face,
                &models.oracle,
                &models.expressions,
                &config.generate_options(),
            )?;
            write(&out, write_dataset_csv(&d))?;
            println!("{} pairs written to {}", d.samples.len(), out.display());
        }
        Command::Train {
            dataset,
            out,
            epochs,
            learning_rate,
            seed,
            loss,
        } => {
            let t = &mut config.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            t.seed = seed.unwrap_or(t.seed);
            config.validate()?;
            let d = read_dataset(&dataset)?;
            let tc = config.train.to_train_config();
            let mut mlp = init_mlp(tc.seed);
            let report = mlp.train(&d.pairs(), &tc)?;
            mlp.normalization = Some(d.table.clone());
            save_model(&mlp, &out)?;
            if let Some(p) = loss {
                let mut text = String::from("epoch,mse\n");
                for (i, l) in report.loss_history.iter().enumerate() {
                    text.push_str(&format!("{},{l}\n", i + 1));
                }
                write(&p, text)?;
            }
            println!(
                "final training MSE {:.6} after {} epochs",
                report.final_loss(),
                tc.epochs
            );
        }
        Command::Transfer { io, out } => {
            let (bundle, frames, input_hash) = prepare(&mut config, &io, None)?;
            let table = input_table(config.transfer.normalization, &bundle.mlp)?;
            let results = transfer_sequence(&bundle, &frames, table)?;
            let info = RunInfo {
                seed: bundle.mlp.seed(),
                config_sha256: config.digest(),
                model_sha256: bundle.model_digest(),
                input_sha256: input_hash,
            };
            export_animation(&results, &bundle.models.face, &info, &out)?;
            println!(
                "{} of {} frames transferred into {}",
                results.frames.len(),
                frames.len(),
                out.display()
            );
            if !results.failures.is_empty() {
                return Err(Error::Convergence {
                    what: format!("{} frames failed", results.failures.len()),
                    residual: results.failures.len() as f64,
                });
            }
        }
        Command::Eval {
            io,
            dataset,
            limit,
            out,
        } => {
            let (bundle, mut frames, _) = prepare(&mut config, &io, dataset.as_deref())?;
            if let Some(n) = limit {
                frames.truncate(n);
            }
            let mode = if dataset.is_some() {
                Normalization::Training
            } else {
                config.transfer.normalization
            };
            let results = transfer_sequence(&bundle, &frames, input_table(mode, &bundle.mlp)?)?;
            let reference: Vec<_> = frames.iter().map(|f| results.table.apply_clamped(&f.aus)).collect();
            let e = evaluate_transfer(&results, &reference)?;
            let report = evaluation_csv(&e);
            match out {
                Some(p) => write(&p, &report)?,
                None => print!("{report}"),
            }
            eprintln!("average AU MSE {:.6} over {} frames", e.average, e.frames);
        }
        Command::Simulate {
            duration,
            open_loop,
            out,
            benchmark: bench,
            steps,
        } => {
            if let Some(d) = duration {
                config.simulate.duration = d;
            }
            if open_loop {
                config.simulate.closed_loop = false;
            }
            if let Some(s) = steps {
                config.simulate.benchmark_steps = s;
            }
            config.validate()?;
            let models = Models::load(&config.model)?;
            if bench {
                let r = benchmark(&models, &config, config.simulate.benchmark_steps)?;
                println!("steps            {}", r.steps);
                println!("neck steps/s     {:.0}", r.neck_steps_per_s);
                println!("face steps/s     {:.0}", r.face_steps_per_s);
                println!("coupled steps/s  {:.0}", r.coupled_steps_per_s);
            } else {
                let csv = trajectory_csv(&simulate(&models, &config)?);
                match out {
                    Some(p) => write(&p, csv)?,
                    None => print!("{csv}"),
                }
            }
        }
        Command::Bundle { out } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for (name, text) in neuroface::bundled::generate_all() {
                write(&out.join(name), text)?;
            }
        }
    }
    Ok(())
}

/// Loads the model bundle and the input frames, returning the SHA-256 of
/// the input file as well.
fn prepare(
    config: &mut RunConfig,
    io: &TransferArgs,
    dataset: Option<&Path>,
) -> Result<(ModelBundle, Vec<AuFrame>, String)> {
    if let Some(n) = io.normalization {
        config.transfer.normalization = n;
    }
    if let Some(t) = io.neck_time {
        config.transfer.neck_time = t;
    }
    config.validate()?;
    let mlp = load_model(&io.model)?;
    let bundle = ModelBundle::new(mlp, Models::load(&config.model)?, config);
    let (frames, hash) = match (dataset, &io.input) {
        (Some(p), _) => {
            let d = read_dataset(p)?;
            let frames = d
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| AuFrame {
                    aus: s.raw_aus,
                    ..AuFrame::neutral(i as u64)
                })
                .collect();
            (frames, sha256_hex(&read(p)?))
        }
        (None, Some(p)) => (read_au_csv(p)?, sha256_hex(&read(p)?)),
        (None, None) => return Err(Error::Config("an --input AU file is required".into())),
    };
    Ok((bundle, frames, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_error_kind_has_its_own_exit_code() {
        let kinds = [
            ErrorKind::Io,
            ErrorKind::Config,
            ErrorKind::Data,
            ErrorKind::Convergence,
        ];
        let mut codes: Vec<u8> = kinds.iter().map(|&k| exit_code(k)).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), kinds.len());
        assert!(!codes.contains(&0));
    }
}
