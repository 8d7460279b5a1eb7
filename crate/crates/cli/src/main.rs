use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flcb::lifelong::Mode;
use flcb::run::{self, RunConfig};
use flcb::{report, Error, Result};

#[derive(Parser)]
#[command(
    name = "flcb",
    version,
    about = "Lifelong crowd counting on synthetic domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every declared domain dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite a non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a run and write its artifacts.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Overwrite a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Summarize a finished run directory.
    Report {
        /// Run directory.
        run: PathBuf,
        /// Second run for a side-by-side delta table.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Data directory for gen-data, run directory for train.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distill {
    Feature,
    Output,
    Both,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Comma-separated domain names.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    distill: Option<Distill>,
    #[arg(long)]
    unseen: Option<String>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(o) = &self.order {
            cfg.order = o.clone();
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda_ = v;
        }
        if let Some(v) = self.eta {
            cfg.loss.eta = v;
        }
        if let Some(v) = self.gamma {
            cfg.loss.gamma = v;
        }
        if let Some(v) = self.sigma {
            cfg.loss.sigma = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs_per_domain = v;
        }
        if let Some(v) = self.seed {
            cfg.model.seed = v;
        }
        if let Some(d) = self.distill {
            cfg.loss.distill_feature = matches!(d, Distill::Feature | Distill::Both);
            cfg.loss.distill_output = matches!(d, Distill::Output | Distill::Both);
        }
        if let Some(u) = &self.unseen {
            cfg.unseen = Some(u.clone());
        }
    }
}

/// Loads the config, resolving relative data/output paths against its directory.
fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if cfg.data_dir.is_relative() {
        cfg.data_dir = base.join(&cfg.data_dir);
    }
    if cfg.output_dir.is_relative() {
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    Ok(cfg)
}

fn gen_data(common: &Common, force: bool) -> Result<()> {
    let mut cfg = load_config(&common.config)?;
    if let Some(out) = &common.out {
        cfg.data_dir = out.clone();
    }
    for dir in run::gen_data(&cfg, force)? {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn train(common: &Common, overrides: &Overrides, force: bool) -> Result<()> {
    let mut cfg = load_config(&common.config)?;
    overrides.apply(&mut cfg);
    let run_dir = common.out.clone().unwrap_or_else(|| cfg.run_dir());
    let a = run::train(&cfg, &run_dir, force)?;
    println!(
        "{} epochs; run written to {}",
        a.instr.epochs,
        run_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::GenData { common, force } => gen_data(common, *force),
        Command::Train {
            common,
            overrides,
            force,
        } => train(common, overrides, *force),
        Command::Report { run, compare } => {
            report::write_report(run, compare.as_deref()).map(|t| print!("{t}"))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
