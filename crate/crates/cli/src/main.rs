use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use marshal_core::engine::write_event_log;
use marshal_core::experiment::{
    aggregate, run_job, write_runs_csv, write_summary_csv, AggregateStats, Job, MatrixCell, RUNS_FILE, SUMMARY_FILE,
};
use marshal_core::oracle::{parse_scenario, run_scenario};
use marshal_core::{
    load_layout, parse_layout, run, run_matrix, validate_layout, Controller, MatrixFile, ScenarioMatrix, SimParams,
};

/// Exit status for bad configuration or input files.
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "marshal", version, about = "Marshaling-yard simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration, optionally several replications.
    Run {
        /// small, medium, large or a layout file
        #[arg(long)]
        layout: String,
        #[arg(long)]
        controller: Controller,
        /// Expected arrivals over the window
        #[arg(long)]
        demand: u32,
        /// Seed of the first replication; replication r uses seed + r
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 5.0)]
        window_hours: f64,
        #[arg(long, default_value_t = 1)]
        reps: u32,
        /// Write runs.csv and summary.csv here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the event log of the first replication as NDJSON
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Run the full experiment matrix.
    Matrix {
        /// TOML matrix file; defaults to the built-in 3x3 grid
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        reps: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads [default: available cores]
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a layout file and list its problems.
    Validate {
        #[arg(long)]
        layout: PathBuf,
    },
    /// Compare assignment and pathing against brute force on a small scenario.
    Oracle {
        #[arg(long)]
        scenario: PathBuf,
    },
}

/// Problem with the user's input rather than with the program.
#[derive(Debug)]
struct BadInput(String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

fn bad(e: impl std::fmt::Display) -> anyhow::Error {
    BadInput(e.to_string()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { layout, controller, demand, seed, window_hours, reps, out, events } => {
            cmd_run(&layout, controller, demand, seed, window_hours, reps, out.as_deref(), events.as_deref())
        }
        Command::Matrix { config, reps, seed, workers, out } => cmd_matrix(config.as_deref(), reps, seed, workers, &out),
        Command::Validate { layout } => cmd_validate(&layout),
        Command::Oracle { scenario } => cmd_oracle(&scenario),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<BadInput>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or("-".into(), |v| format!("{v:.digits$}"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    layout_spec: &str,
    controller: Controller,
    demand: u32,
    seed: u64,
    window_hours: f64,
    reps: u32,
    out: Option<&Path>,
    events: Option<&Path>,
) -> Result<ExitCode> {
    let (layout, _) = load_layout(layout_spec, Path::new(".")).map_err(bad)?;
    let params = SimParams { window: window_hours * 3600.0, ..SimParams::default() };
    let matrix = ScenarioMatrix {
        cells: vec![MatrixCell { name: layout_spec.into(), layout: Arc::new(layout), demands: vec![demand] }],
        controllers: vec![controller],
        replications: reps,
        base_seed: seed,
        params,
    };
    matrix.validate().map_err(bad)?;

    if let Some(path) = events {
        let cell = &matrix.cells[0];
        let o = run(&matrix.params.config(cell.layout.clone(), controller, demand as f64, seed))?;
        let w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        write_event_log(&o.events, w)?;
    }

    let records: Vec<_> = (0..reps)
        .map(|rep| {
            let job = Job { cell: 0, demand, controller, rep, seed: seed.wrapping_add(rep as u64) };
            run_job(&matrix, &job)
        })
        .collect();
    println!("rep  seed                  status            arrivals  exits  veh/h    failure_s");
    for r in &records {
        println!(
            "{:<4} {:<21} {:<17} {:>8} {:>6}  {:>7} {:>10}",
            r.rep,
            r.seed,
            format!("{:?}", r.status),
            r.arrivals,
            r.exits,
            fmt_opt(r.throughput, 2),
            fmt_opt(r.failure_time, 0)
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let stats = aggregate(&records, seed, matrix.params.window);
        write_runs_csv(&records, &dir.join(RUNS_FILE))?;
        write_summary_csv(&stats, &dir.join(SUMMARY_FILE))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_matrix(
    config: Option<&Path>,
    reps: Option<u32>,
    seed: Option<u64>,
    workers: Option<usize>,
    out: &Path,
) -> Result<ExitCode> {
    let (mut matrix, file_workers) = match config {
        Some(path) => {
            let file = MatrixFile::load(path).map_err(bad)?;
            let workers = file.workers;
            let base = path.parent().unwrap_or(Path::new("."));
            (file.into_matrix(base).map_err(bad)?, workers)
        }
        None => (ScenarioMatrix::default(), None),
    };
    if let Some(r) = reps {
        matrix.replications = r;
    }
    if let Some(s) = seed {
        matrix.base_seed = s;
    }
    matrix.validate().map_err(bad)?;
    let workers = workers
        .or(file_workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    eprintln!("{} runs on {} worker(s)", matrix.run_count(), workers);
    let result = run_matrix(&matrix, workers, Some(out))?;
    print_summary(&result.stats);
    Ok(ExitCode::SUCCESS)
}

fn print_summary(stats: &AggregateStats) {
    println!("size     demand  controller     runs  fail%  veh/h   sd     delta");
    for c in &stats.cells {
        println!(
            "{:<8} {:>6}  {:<13} {:>5} {:>6.1}  {:>6} {:>6} {:>6}",
            c.size,
            c.demand,
            c.controller.name(),
            c.runs,
            100.0 * c.failure_rate,
            fmt_opt(c.throughput_mean, 2),
            fmt_opt(c.throughput_sd, 2),
            fmt_opt(c.paired_delta_mean, 2),
        );
    }
    println!("mean paired delta over cells: {} veh/h", fmt_opt(stats.overall_paired_delta, 3));
}

fn cmd_validate(path: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(bad)?;
    let layout = match parse_layout(&text) {
        Ok(l) => l,
        Err(e) => {
            println!("{}: {e}", path.display());
            return Ok(ExitCode::FAILURE);
        }
    };
    let violations = validate_layout(&layout);
    if violations.is_empty() {
        println!("{}: ok ({}x{})", path.display(), layout.width, layout.height);
        for (kind, s) in layout.stations.iter().map(|s| (s.kind, s)) {
            println!("  {:<10} {:>3} berths, gate {}", kind.to_string(), s.berth_count, s.gate);
        }
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        println!("{}: {v}", path.display());
    }
    Ok(ExitCode::FAILURE)
}

fn cmd_oracle(path: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(bad)?;
    let scenario = parse_scenario(&text).map_err(bad)?;
    let report = run_scenario(&scenario).map_err(bad)?;
    print!("{report}");
    Ok(if report.all_match() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
