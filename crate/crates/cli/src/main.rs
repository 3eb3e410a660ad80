//! `ifes` — train, fuse, evaluate, gradient-check, and ablate the
//! infrared/visible fusion network.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 checkpoint integrity,
//! 5 gradient verification, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ifes_core::pipeline::{
    cmd_ablate, cmd_eval, cmd_fuse, cmd_gradcheck, cmd_train, gradcheck_failure, RunConfig,
    ABLATION_VARIANTS, GRADCHECK_THRESHOLD,
};
use ifes_core::Error;

/// Environment variable overriding every output directory argument.
const OUT_DIR_ENV: &str = "IFES_OUT_DIR";

#[derive(Parser)]
#[command(name = "ifes", version, about = "Infrared/visible image fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set iterations=100 --set variant=hc.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got '{s}'")));
            };
            cfg.apply(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write a checkpoint plus per-iteration loss log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for model.ckpt and train_log.csv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fuse one registered infrared/visible pair with a trained checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        /// Output PGM path.
        #[arg(long)]
        out: PathBuf,
        /// Smooth the weight maps with a Gaussian filter (variance 2).
        #[arg(long)]
        smooth: bool,
        /// Also write the two weight maps as diagnostic PGM images.
        #[arg(long, num_args = 2, value_names = ["W1", "W2"])]
        weight_maps: Option<Vec<PathBuf>>,
    },
    /// Compute quality metrics over a directory of (ir, vis, fused) triples.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory holding the triples.
        #[arg(long)]
        dir: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate a grid of architecture/loss variants.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated subset of: full,no_ifem,s1,s2,s3,s4,hc,mae.
        #[arg(long, value_delimiter = ',', default_values_t = ABLATION_VARIANTS.map(String::from))]
        variants: Vec<String>,
        /// Output directory for ablation.csv and per-variant checkpoints.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn out_dir_override(requested: PathBuf) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => requested,
    }
}

fn exit_class(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parameter { .. } => 2,
        Error::Data { .. } | Error::Parse { .. } | Error::Io { .. } | Error::Dimension { .. } => 3,
        Error::Integrity(_) => 4,
        Error::Verification { .. } => 5,
        Error::Training(_) => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = config.resolve()?;
            let out = out_dir_override(out);
            let summary = cmd_train(&cfg, &out)?;
            println!(
                "trained {} iterations: total loss {:.6} -> {:.6}",
                summary.iterations, summary.first_total, summary.last_total
            );
            println!("checkpoint: {}", summary.checkpoint_path.display());
            println!("log: {}", summary.log_path.display());
            Ok(())
        }
        Command::Fuse {
            checkpoint,
            ir,
            vis,
            out,
            smooth,
            weight_maps,
        } => {
            let maps = weight_maps
                .as_ref()
                .map(|v| (v[0].as_path(), v[1].as_path()));
            cmd_fuse(&checkpoint, &ir, &vis, &out, smooth, maps)?;
            println!("fused: {}", out.display());
            Ok(())
        }
        Command::Eval { config, dir, out } => {
            let cfg = config.resolve()?;
            let outcome = cmd_eval(&dir, &cfg)?;
            let csv = outcome.report.to_csv();
            match out {
                Some(path) => std::fs::write(&path, &csv)
                    .map_err(|e| Error::io(path.display().to_string(), e))?,
                None => print!("{csv}"),
            }
            if !outcome.skipped.is_empty() {
                for id in &outcome.skipped {
                    eprintln!("skipped incomplete triple: {id}");
                }
                return Err(Error::Data {
                    path: dir.display().to_string(),
                    message: format!("{} incomplete triple(s) skipped", outcome.skipped.len()),
                });
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let entries = cmd_gradcheck(seed)?;
            for e in &entries {
                let status = if e.max_rel_error <= GRADCHECK_THRESHOLD {
                    "ok"
                } else {
                    "FAIL"
                };
                println!("{:<18} {:>12.3e}  {status}", e.component, e.max_rel_error);
            }
            if let Some(bad) = gradcheck_failure(&entries) {
                return Err(Error::Verification {
                    component: bad.component.clone(),
                    error: bad.max_rel_error,
                    threshold: GRADCHECK_THRESHOLD,
                });
            }
            Ok(())
        }
        Command::Ablate {
            config,
            variants,
            out,
        } => {
            let cfg = config.resolve()?;
            let out = out_dir_override(out);
            let csv_path = cmd_ablate(&cfg, &variants, &out)?;
            print!("{}", std::fs::read_to_string(&csv_path).unwrap_or_default());
            println!("written: {}", csv_path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_class(&err))
        }
    }
}
