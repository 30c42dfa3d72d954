//! `gdg`: run the few-shot grounded dialog prompting protocol from config files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdg_core::corpus::{write_corpus, Task};
use gdg_core::experiment::{
    cmd_compare, cmd_evaluate, cmd_prepare, cmd_report, cmd_run, Overrides, RunConfig,
};
use gdg_core::synthetic::{generate_corpus, SyntheticSpec};
use gdg_core::Error;

#[derive(Parser)]
#[command(
    name = "gdg",
    version,
    about = "Few-shot prompting experiments for grounded dialog generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Only these runs, comma separated (e.g. s0_r0,s1_r1).
    #[arg(long, value_delimiter = ',')]
    runs: Option<Vec<String>>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter the corpora, draw few-shot splits and prepare the backbone.
    Prepare(Common),
    /// Fine-tune and decode every run of the configured system.
    Run(Common),
    /// Score the generations of every run.
    Evaluate(Common),
    /// Significance tests between two evaluated systems.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Config of the second system.
        #[arg(long)]
        against: PathBuf,
    },
    /// One starred table over several evaluated systems.
    Report {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus as JSONL.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "syn")]
        id_prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            runs: self.runs.clone(),
            out: self.out.clone(),
        }
    }

    fn load(&self) -> Result<(RunConfig, Overrides), Error> {
        let o = self.overrides();
        Ok((load_with(&self.config, &o)?, o))
    }
}

fn load_with(path: &PathBuf, o: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    o.apply(&mut cfg);
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Prepare(c) => {
            let (cfg, _) = c.load()?;
            let m = cmd_prepare(&cfg)?;
            println!(
                "prepared {} splits in {}",
                m.splits.len(),
                cfg.out_dir.join("prepare").display()
            );
        }
        Command::Run(c) => {
            let (cfg, o) = c.load()?;
            let m = cmd_run(&cfg, &o)?;
            println!("{}: {} runs complete", cfg.system_name(), m.runs.len());
        }
        Command::Evaluate(c) => {
            let (cfg, o) = c.load()?;
            print!("{}", cmd_evaluate(&cfg, &o)?.to_table());
        }
        Command::Compare { common, against } => {
            let (a, o) = common.load()?;
            let b = load_with(&against, &o)?;
            let (rows, table) = cmd_compare(&a, &b, &o)?;
            for r in rows {
                println!(
                    "{:<13} {:?}: statistic {:.4}, p = {:.4} {}",
                    r.metric, r.test, r.statistic, r.p, r.mark
                );
            }
            print!("{table}");
        }
        Command::Report { configs, seed, out } => {
            let o = Overrides {
                seed,
                runs: None,
                out,
            };
            let cfgs = configs
                .iter()
                .map(|p| load_with(p, &o))
                .collect::<Result<Vec<_>, _>>()?;
            print!("{}", cmd_report(&cfgs)?);
        }
        Command::Synth {
            task,
            samples,
            seed,
            id_prefix,
            out,
        } => {
            let spec = SyntheticSpec {
                id_prefix,
                ..SyntheticSpec::new(task.parse::<Task>()?, samples, seed)
            };
            write_corpus(&out, &generate_corpus(&spec))?;
            println!("wrote {samples} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
