//! `seqpe` binary: argument parsing and exit-code policy.
//!
//! Exit codes: 0 success, 1 configuration or I/O problems, 2 numeric
//! failures (divergence, failed gradient checks).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use seqpe::SeqPeError;
use seqpe_cli::commands;
use seqpe_cli::config::{ExtentSpec, RunConfig};

#[derive(Parser)]
#[command(
    name = "seqpe",
    version,
    about = "Train and probe transformer position encodings from the command line"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch and write checkpoint + metrics.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.jsonl, checkpoint.bin, summary.json.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Override the config seed (changes the checkpoint fingerprint).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure a trained checkpoint at one or more extents; writes CSV.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV path.
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
        /// Serve position embeddings from this precomputed table.
        #[arg(long)]
        use_table: Option<PathBuf>,
        /// Extents to measure, e.g. `64,256` or `8x8,14x14` (defaults to
        /// the config's [eval] extents).
        #[arg(long, value_delimiter = ',')]
        extents: Option<Vec<String>>,
        /// Must match the seed the checkpoint was trained with.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Freeze the digit encoder into a position-embedding lookup table.
    Precompute {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output table path.
        #[arg(long, default_value = "table.bin")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dot products between position embeddings, written as CSV matrices.
    Heatmap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the CSV files.
        #[arg(long, default_value = "heatmaps")]
        out: PathBuf,
        /// Serve position embeddings from this precomputed table.
        #[arg(long)]
        use_table: Option<PathBuf>,
        /// Extent to map, e.g. `64` or `14x14` (defaults to the training
        /// extent).
        #[arg(long)]
        extent: Option<String>,
        /// 2-D anchor cells as `y,x` pairs separated by `;`, e.g.
        /// `0,0;7,7` (defaults to the four corners plus the center).
        #[arg(long, value_delimiter = ';')]
        anchors: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients of the full training objective against
    /// finite differences (small models only).
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Seed for the probe batch (defaults to the config seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt one analytic gradient entry, `param.name:index`, to
        /// prove the check can fail.
        #[arg(long)]
        sabotage: Option<String>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> seqpe::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn parse_extents(specs: &[String]) -> seqpe::Result<Vec<ExtentSpec>> {
    specs.iter().map(|s| ExtentSpec::parse(s)).collect()
}

fn parse_anchor(s: &str) -> seqpe::Result<Vec<i64>> {
    let coords: Result<Vec<i64>, _> = s.split(',').map(|t| t.trim().parse::<i64>()).collect();
    match coords {
        Ok(c) if c.len() == 2 => Ok(c),
        _ => Err(SeqPeError::ConfigInvalid(format!(
            "anchor {s:?} is not a y,x pair"
        ))),
    }
}

fn parse_sabotage(s: &str) -> seqpe::Result<(String, usize)> {
    if let Some((name, idx)) = s.rsplit_once(':') {
        if let Ok(i) = idx.parse::<usize>() {
            return Ok((name.to_string(), i));
        }
    }
    Err(SeqPeError::ConfigInvalid(format!(
        "sabotage spec {s:?} is not param.name:index"
    )))
}

fn run(cmd: Cmd) -> seqpe::Result<()> {
    match cmd {
        Cmd::Train { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            commands::cmd_train(&cfg, &out)?;
        }
        Cmd::Eval {
            config,
            checkpoint,
            out,
            use_table,
            extents,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let extents = match extents {
                Some(specs) => Some(parse_extents(&specs)?),
                None => None,
            };
            commands::cmd_eval(&cfg, &checkpoint, use_table.as_deref(), extents, &out)?;
        }
        Cmd::Precompute {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            commands::cmd_precompute(&cfg, &checkpoint, &out)?;
        }
        Cmd::Heatmap {
            config,
            checkpoint,
            out,
            use_table,
            extent,
            anchors,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let extent = match extent {
                Some(s) => Some(ExtentSpec::parse(&s)?),
                None => None,
            };
            let anchors = match anchors {
                Some(specs) => Some(
                    specs
                        .iter()
                        .map(|s| parse_anchor(s))
                        .collect::<seqpe::Result<Vec<_>>>()?,
                ),
                None => None,
            };
            commands::cmd_heatmap(
                &cfg,
                &checkpoint,
                use_table.as_deref(),
                extent,
                anchors,
                &out,
            )?;
        }
        Cmd::Gradcheck {
            config,
            seed,
            sabotage,
        } => {
            let cfg = load_config(&config, None)?;
            let seed = seed.unwrap_or(cfg.seed);
            let sabotage = match sabotage {
                Some(s) => Some(parse_sabotage(&s)?),
                None => None,
            };
            commands::cmd_gradcheck(&cfg, seed, sabotage)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(SeqPeError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
