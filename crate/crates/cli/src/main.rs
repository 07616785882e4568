//! `arbor`: run, resume and inspect tree-search experiment runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use arbor_core::metrics::{gains_table, parse_scores_csv, parse_trajectory_csv, MetricsError};
use arbor_core::runtime::engine::final_report;
use arbor_core::runtime::render::{render_trajectory_svg, render_tree};
use arbor_core::runtime::state::load_tree;
use arbor_core::runtime::{Engine, RunConfig, RuntimeError};
use arbor_core::search::{UctParams, DEFAULT_EXPLORATION};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arbor", version, about = "Tree-search orchestration of fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run in the configured workspace.
    Run(RunArgs),
    /// Continue the run persisted in the configured workspace.
    Resume(RunArgs),
    /// Inspect a run's experiment tree.
    Tree {
        #[command(subcommand)]
        command: TreeCommand,
    },
    /// Render a trajectory CSV as an SVG chart or as iteration,score,frontier data.
    Plot {
        csv: PathBuf,
        /// `.svg` writes a chart, anything else writes data. Default: data on stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "trajectory")]
        title: String,
    },
    /// Relative gains from a scores CSV (task, ref_score, base_score, ft_score).
    Gains { scores: PathBuf },
}

#[derive(Subcommand)]
enum TreeCommand {
    /// Print the tree with N, Q, UCT and status per node.
    Show {
        /// A workspace directory or a persisted `tree.json`.
        path: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EXPLORATION)]
        exploration: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    workspace: Option<PathBuf>,
    /// Disable bad-case analysis.
    #[arg(long)]
    no_bad_cases: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = &self.policy {
            c.policy = p.clone();
        }
        if let Some(i) = self.iterations {
            c.budgets.iterations = Some(i);
        }
        if let Some(w) = &self.workspace {
            c.workspace = w.clone();
        }
        if self.no_bad_cases {
            c.bad_case_analysis = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(args: &RunArgs, resume: bool) -> Result<()> {
    let config = args.load()?;
    let mut engine = Engine::new(config)?;
    let summary = if resume { engine.resume()? } else { engine.run()? };
    print!("{}", final_report(&summary, &engine.task, &engine.config));
    Ok(())
}

fn tree_show(path: &Path, exploration: f64) -> Result<()> {
    let file = if path.is_dir() { path.join("state").join("tree.json") } else { path.to_path_buf() };
    let state = load_tree(&file)?;
    let params = UctParams::new(exploration)?;
    print!("{}", render_tree(&state.tree, &params));
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| RuntimeError::io(path, e).into())
}

fn plot(csv: &Path, out: Option<&Path>, title: &str) -> Result<()> {
    let rows = parse_trajectory_csv(&read(csv)?).map_err(|e| anyhow!(PlotError(format!("{}: {e}", csv.display()))))?;
    let svg = out.is_some_and(|o| o.extension().is_some_and(|e| e.eq_ignore_ascii_case("svg")));
    let body = if svg {
        render_trajectory_svg(&rows, title)
    } else {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from("iteration,score,frontier\n");
        for (i, score, frontier) in &rows {
            s.push_str(&format!("{i},{},{}\n", fmt(*score), fmt(*frontier)));
        }
        s
    };
    match out {
        Some(o) => std::fs::write(o, body).map_err(|e| RuntimeError::io(o, e))?,
        None => print!("{body}"),
    }
    Ok(())
}

fn gains(path: &Path) -> Result<()> {
    let rows = parse_scores_csv(&read(path)?)?;
    print!("{}", gains_table(&rows)?);
    Ok(())
}

#[derive(Debug)]
struct PlotError(String);

impl std::fmt::Display for PlotError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PlotError {}

/// The slug printed in `error: <kind>: <message>`.
fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(r) = e.downcast_ref::<RuntimeError>() {
        r.kind()
    } else if e.downcast_ref::<MetricsError>().is_some() {
        "metrics"
    } else if e.downcast_ref::<arbor_core::search::SearchError>().is_some() {
        "search"
    } else if e.downcast_ref::<PlotError>().is_some() {
        "trajectory"
    } else {
        "error"
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => run(&a, false),
        Command::Resume(a) => run(&a, true),
        Command::Tree { command: TreeCommand::Show { path, exploration } } => tree_show(&path, exploration),
        Command::Plot { csv, out, title } => plot(&csv, out.as_deref(), &title),
        Command::Gains { scores } => gains(&scores),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors often repeat their source in their own message.
            let mut message = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&cause);
                }
            }
            let message = message.replace('\n', " ");
            eprintln!("error: {}: {message}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
