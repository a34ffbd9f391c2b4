//! Command-line driver: single runs, sweeps, table merging and the
//! acceptance suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use il_lab::experiments::{bribery_grid, emit_bribery_table, render_bribery_markdown};
use il_lab::metrics::{emit_table, render_markdown, MetricsReport};
use il_lab::scenario::{
    run_scenario, sweep, write_outputs, write_trace, Experiment, ScenarioConfig, ScenarioError, SweepGrid,
};
use il_lab::sim::SimError;
use il_lab::verify::{verify, CRITERIA};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_CRITERION: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "il-lab", version, about = "Inclusion-list censorship-resistance laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Overrides the RNG seed (`net.seed`; for sweeps, the seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; takes precedence over `IL_LAB_OUT` and the config.
    #[arg(long, env = "IL_LAB_OUT")]
    out: Option<PathBuf>,
    /// Record the message trace (`trace.jsonl`).
    #[arg(long)]
    trace: bool,
    /// Overrides the round cap.
    #[arg(long)]
    max_rounds: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its report.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a grid of scenarios and write the aggregate table.
    Sweep {
        grid: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Merge `report.json` files into one table.
    Table {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, env = "IL_LAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Run the acceptance criteria.
    Verify {
        /// Criterion ids to run (default: all).
        #[arg(long = "only", value_delimiter = ',')]
        only: Vec<u8>,
    },
}

/// A failure with its exit code.
struct Failure(u8, String);

impl Failure {
    fn config(msg: impl std::fmt::Display) -> Self {
        Failure(EXIT_CONFIG, msg.to_string())
    }

    fn runtime(msg: impl std::fmt::Display) -> Self {
        Failure(EXIT_RUNTIME, msg.to_string())
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(_) => Failure::config(e),
            _ => Failure::runtime(e),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn apply(cfg: &mut ScenarioConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.net.seed = seed;
    }
    if let Some(cap) = common.max_rounds {
        cfg.max_rounds = cap;
    }
    cfg.trace |= common.trace;
}

fn out_dir(common_out: &Option<PathBuf>, cfg: &ScenarioConfig) -> PathBuf {
    common_out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(slug(&cfg.name)))
}

fn cmd_run(path: &Path, common: &Common) -> Result<(), Failure> {
    let mut cfg = ScenarioConfig::from_json(&read(path)?).map_err(Failure::config)?;
    apply(&mut cfg, common);
    let dir = out_dir(&common.out, &cfg);
    match run_scenario(&cfg) {
        Ok(outcome) => {
            write_outputs(&outcome, &dir)?;
            print!("{}", render_markdown(std::slice::from_ref(&outcome.report)));
            eprintln!("wrote {}", dir.display());
            Ok(())
        }
        Err(ScenarioError::Sim(SimError::Timeout {
            round,
            pending,
            partial,
        })) => {
            if let Some(trace) = &partial.trace {
                std::fs::create_dir_all(&dir).map_err(Failure::runtime)?;
                write_trace(trace, &dir.join("trace.jsonl"))?;
                eprintln!("partial trace in {}", dir.join("trace.jsonl").display());
            }
            Err(Failure::runtime(format!(
                "round cap reached at round {round} with {pending} envelopes in flight"
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_sweep(path: &Path, common: &Common) -> Result<(), Failure> {
    let mut grid = SweepGrid::from_json(&read(path)?).map_err(Failure::config)?;
    if let Some(seed) = common.seed {
        grid.seeds = vec![seed];
    }
    if let Some(cap) = common.max_rounds {
        grid.base.max_rounds = cap;
    }
    let dir = common
        .out
        .clone()
        .or_else(|| grid.base.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out/sweep"));
    let failed = match grid.experiment {
        Experiment::Metrics => {
            let reports = sweep(&grid).map_err(Failure::config)?;
            emit_table(&reports, &dir).map_err(Failure::runtime)?;
            print!("{}", render_markdown(&reports));
            reports.iter().filter(|r| r.error.is_some()).count()
        }
        Experiment::Bribery => {
            let rows = bribery_grid(&grid).map_err(Failure::config)?;
            emit_bribery_table(&rows, &dir).map_err(Failure::runtime)?;
            print!("{}", render_bribery_markdown(&rows));
            rows.iter().filter(|r| r.error.is_some()).count()
        }
    };
    eprintln!("wrote {}", dir.display());
    if failed > 0 {
        return Err(Failure::runtime(format!(
            "{failed} cell(s) failed; see the error column"
        )));
    }
    Ok(())
}

fn cmd_table(paths: &[PathBuf], out: &Option<PathBuf>) -> Result<(), Failure> {
    let mut reports: Vec<MetricsReport> = Vec::new();
    for path in paths {
        let text = read(path)?;
        let parsed: Vec<MetricsReport> = serde_json::from_str(&text)
            .or_else(|_| serde_json::from_str::<MetricsReport>(&text).map(|r| vec![r]))
            .map_err(|e| Failure::config(format!("{}: not a report file: {e}", path.display())))?;
        reports.extend(parsed);
    }
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("out/table"));
    emit_table(&reports, &dir).map_err(Failure::runtime)?;
    print!("{}", render_markdown(&reports));
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn cmd_verify(only: &[u8]) -> Result<(), Failure> {
    let ids: Vec<u8> = if only.is_empty() {
        CRITERIA.iter().map(|(id, _)| *id).collect()
    } else {
        only.to_vec()
    };
    if let Some(bad) = ids.iter().find(|id| !CRITERIA.iter().any(|(c, _)| c == *id)) {
        return Err(Failure::config(format!(
            "no criterion {bad} (valid: 1..={})",
            CRITERIA.len()
        )));
    }
    let results = verify(&ids);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Failure(EXIT_CRITERION, format!("{failed} criterion failure(s)")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, common } => cmd_run(config, common),
        Command::Sweep { grid, common } => cmd_sweep(grid, common),
        Command::Table { reports, out } => cmd_table(reports, out),
        Command::Verify { only } => cmd_verify(only),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
