use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtct_cli::run::{self, Stage1Cache};
use mtct_cli::{CliError, ExperimentConfig, Result};

/// Multi-task curriculum transfer experiments on synthetic cross-domain data.
///
/// Settings resolve as defaults, then --config, then --set, then dedicated
/// flags. Run `mtct keys` to list every config key with its default.
#[derive(Parser)]
#[command(name = "mtct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out splits plus a manifest.
    GenData(Common),
    /// Train one regime on a generated dataset.
    Train(Common),
    /// Evaluate a checkpoint on the held-out target images.
    Eval(Common),
    /// Train and evaluate every regime over the seed list.
    Compare(Common),
    /// Train regimes on shrinking fractions of the target training split.
    Sweep(Common),
    /// Check analytic gradients of every op and loss against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the analytic gradient of the named check.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print every config key with its default value.
    Keys,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// NOADPT, UD, FTT, END2END or MTCT.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Write outputs here instead of a fresh timestamped directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            cfg.assign(kv)?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("regime", self.regime.clone()),
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string())),
            ("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string())),
            ("threshold", self.threshold.map(|v| v.to_string())),
            ("run_dir", self.run_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn start(common: &Common, command: &str) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = common.resolve()?;
    print!("{}", cfg.to_text());
    let dir = run::prepare_run_dir(&cfg, command)?;
    println!("run_dir {}", dir.display());
    Ok((cfg, dir))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Keys => print!("{}", ExperimentConfig::default().to_text()),
        Command::GenData(c) => {
            let (cfg, dir) = start(&c, "gen-data")?;
            let out = run::gen_data(&cfg, &dir)?;
            println!("dataset {} train {} heldout {}", out.dataset_id, out.train_samples, out.heldout_samples);
        }
        Command::Train(c) => {
            let (cfg, dir) = start(&c, "train")?;
            let out = run::train(&cfg, &dir)?;
            print!("{}", out.outcome.record.to_lines());
            for p in out.checkpoint_paths {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval(c) => {
            let (cfg, dir) = start(&c, "eval")?;
            let report = run::eval(&cfg, &dir)?;
            print!("{}", report.to_table());
        }
        Command::Compare(c) => {
            let (cfg, dir) = start(&c, "compare")?;
            let out = run::compare(&cfg, &dir, &mut Stage1Cache::new())?;
            print!("{}", run::compare_table(&out.rows));
            println!("elapsed {:.1}s", out.elapsed_s);
        }
        Command::Sweep(c) => {
            let (cfg, dir) = start(&c, "sweep")?;
            let out = run::sweep(&cfg, &dir, &mut Stage1Cache::new())?;
            print!("{}", run::sweep_table(&out));
        }
        Command::Gradcheck { common, inject_fault } => {
            let (cfg, dir) = start(&common, "gradcheck")?;
            let report = run::gradcheck(&cfg, &dir, inject_fault)?;
            print!("{}", report.to_table());
            if !report.passed() {
                let names: Vec<&str> = report.failures().iter().map(|f| f.name.as_str()).collect();
                return Err(CliError::Failed(format!("gradient check failed: {}", names.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
