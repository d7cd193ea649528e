use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dpg_core::config::{parse_override, resolve, RunConfig};
use dpg_core::par::Execution;
use dpg_core::run::{ablate, eval_run, parse_grid, train_run};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "DPG_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "dpg",
    version,
    about = "Deterministic policy gradient fine-tuning of toy diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `trainer.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set trainer.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `$DPG_OUT_DIR/train-seed-N` (or `runs/`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of a grid and write a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Grid axis `KEY=V1,V2,...`. Repeatable.
        #[arg(long, value_name = "KEY=V1,V2", required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run cells one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Evaluate a checkpoint of an existing run.
    Eval {
        run_dir: PathBuf,
        /// Checkpoint step; the latest when omitted.
        #[arg(long)]
        step: Option<usize>,
        /// Evaluation seed; the run's eval seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the reference sets as TSV.
    DumpDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print beta, alpha, alpha-bar and look-ahead weight per timestep.
    ShowSchedule {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

type Overrides = Vec<(String, toml::Value)>;

fn load_config(args: &ConfigArgs) -> Result<(Option<String>, Overrides, RunConfig)> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut overrides = args
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<dpg_core::Result<Vec<_>>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("trainer.seed".to_string(), toml::Value::Integer(seed as i64)));
    }
    let cfg = resolve(text.as_deref(), &overrides)?;
    Ok((text, overrides, cfg))
}

fn default_out(name: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => {
            let (_, _, config) = load_config(&cfg)?;
            let out = out.unwrap_or_else(|| default_out(&format!("train-seed-{}", config.trainer.seed)));
            let outcome = train_run(&config, &out)?;
            println!("{}", outcome.dir.path.display());
            print!("{}", outcome.report.to_text());
        }
        Command::Ablate {
            cfg,
            grid,
            out,
            sequential,
        } => {
            let (text, overrides, config) = load_config(&cfg)?;
            let axes = grid
                .iter()
                .map(|g| parse_grid(g))
                .collect::<dpg_core::Result<Vec<_>>>()?;
            let out = out.unwrap_or_else(|| default_out(&format!("ablate-seed-{}", config.trainer.seed)));
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            };
            ablate(text.as_deref(), &overrides, &axes, &out, exec)?;
            print!("{}", fs::read_to_string(out.join("ablation.tsv"))?);
        }
        Command::Eval { run_dir, step, seed } => {
            let (path, report) = eval_run(&run_dir, step, seed)?;
            println!("{}", path.display());
            print!("{}", report.to_text());
        }
        Command::DumpDataset { cfg, out } => {
            let (_, _, config) = load_config(&cfg)?;
            let dump = config.dataset()?.dump();
            write_or_print(out.as_deref(), &dump)?;
        }
        Command::ShowSchedule { cfg } => {
            let (_, _, config) = load_config(&cfg)?;
            let s = config.schedule()?;
            let mut table = String::from("t\tbeta\talpha\talpha_bar\tlookahead_weight\n");
            for t in 0..s.len() {
                table.push_str(&format!(
                    "{t}\t{:?}\t{:?}\t{:?}\t{:?}\n",
                    s.beta(t),
                    s.alpha(t),
                    s.alpha_bar(t),
                    s.lookahead_weight(t)
                ));
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn exit_code(category: &str) -> u8 {
    match category {
        "argument" => 2,
        "config" => 3,
        "numerics" => 4,
        "diverged" => 5,
        "format" => 6,
        "eval" => 7,
        "io" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = match e.downcast_ref::<dpg_core::Error>() {
                Some(core) => core.category(),
                None if e.downcast_ref::<std::io::Error>().is_some() => "io",
                None => "other",
            };
            eprintln!("error[{category}]: {e:#}");
            ExitCode::from(exit_code(category))
        }
    }
}
