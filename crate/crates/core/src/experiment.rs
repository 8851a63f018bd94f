//! Replicated runs over a (layout, demand, controller) grid and the
//! statistics reported from them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SimParams;
use crate::engine::{run, ConfigError, Controller, RunOutcome, RunStatus};
use crate::yard::{builtin_layout, YardLayout, YardSize};

pub const DEFAULT_REPLICATIONS: u32 = 30;
pub const DEFAULT_BASE_SEED: u64 = 20_240_501;

pub const RUNS_FILE: &str = "runs.csv";
pub const PARTIAL_RUNS_FILE: &str = "runs.partial.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_JSON_FILE: &str = "summary.json";

/// One layout with its demand levels.
#[derive(Debug, Clone)]
pub struct MatrixCell {
    pub name: String,
    pub layout: Arc<YardLayout>,
    pub demands: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ScenarioMatrix {
    pub cells: Vec<MatrixCell>,
    pub controllers: Vec<Controller>,
    pub replications: u32,
    pub base_seed: u64,
    pub params: SimParams,
}

impl Default for ScenarioMatrix {
    fn default() -> Self {
        ScenarioMatrix {
            cells: YardSize::ALL
                .iter()
                .map(|&s| MatrixCell {
                    name: s.name().into(),
                    layout: Arc::new(builtin_layout(s)),
                    demands: s.demand_levels().to_vec(),
                })
                .collect(),
            controllers: Controller::ALL.to_vec(),
            replications: DEFAULT_REPLICATIONS,
            base_seed: DEFAULT_BASE_SEED,
            params: SimParams::default(),
        }
    }
}

impl ScenarioMatrix {
    pub fn run_count(&self) -> usize {
        let demands: usize = self.cells.iter().map(|c| c.demands.len()).sum();
        demands * self.controllers.len() * self.replications as usize
    }

    /// Every run in canonical order: cell, demand, controller, replication.
    pub fn jobs(&self) -> Vec<Job> {
        let mut jobs = Vec::with_capacity(self.run_count());
        for (cell_index, cell) in self.cells.iter().enumerate() {
            for &demand in &cell.demands {
                for &controller in &self.controllers {
                    for rep in 0..self.replications {
                        let seed = replication_seed(self.base_seed, &cell.name, demand, rep);
                        jobs.push(Job { cell: cell_index, demand, controller, rep, seed });
                    }
                }
            }
        }
        jobs
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for cell in &self.cells {
            for &demand in &cell.demands {
                for &c in &self.controllers {
                    self.params.config(cell.layout.clone(), c, demand as f64, 0).validate()?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub cell: usize,
    pub demand: u32,
    pub controller: Controller,
    pub rep: u32,
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed shared by both controllers of one replication. Depends only on its
/// own key, so adding replications or cells leaves existing seeds alone.
pub fn replication_seed(base_seed: u64, cell: &str, demand: u32, rep: u32) -> u64 {
    let mut h = splitmix(base_seed);
    for b in cell.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    h = splitmix(h ^ u64::from(demand));
    splitmix(h ^ (u64::from(rep) << 32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Completed,
    FacilityFailure,
    TimeCap,
    /// The engine reported an internal error; the matrix carries on.
    Error,
}

impl From<RunStatus> for RecordStatus {
    fn from(s: RunStatus) -> Self {
        match s {
            RunStatus::Completed => RecordStatus::Completed,
            RunStatus::FacilityFailure => RecordStatus::FacilityFailure,
            RunStatus::TimeCap => RecordStatus::TimeCap,
        }
    }
}

/// One row of `runs.csv`. Times are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub size: String,
    pub demand: u32,
    pub controller: Controller,
    pub rep: u32,
    pub seed: u64,
    pub status: RecordStatus,
    pub arrivals: u32,
    pub exits: u32,
    /// Vehicles per hour up to the last exit; completed runs only.
    pub throughput: Option<f64>,
    pub failure_time: Option<f64>,
    pub exits_in_window: u32,
    pub last_exit_time: Option<f64>,
}

/// Exits per hour up to the last exit. `None` unless the run completed.
pub fn throughput(outcome: &RunOutcome) -> Option<f64> {
    (outcome.status == RunStatus::Completed).then(|| throughput_of(outcome.exited_count, outcome.last_exit_time))
}

fn throughput_of(exits: u32, last_exit: Option<f64>) -> f64 {
    match last_exit {
        Some(t) if exits > 0 && t > 0.0 => exits as f64 / (t / 3600.0),
        _ => 0.0,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("failure rate of an empty set of runs")]
    NoRuns,
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.into(), source }
}

/// Fraction of runs that ended in a facility failure.
pub fn failure_rate<I: IntoIterator<Item = RecordStatus>>(statuses: I) -> Result<f64, ExperimentError> {
    let (mut n, mut failed) = (0u32, 0u32);
    for s in statuses {
        n += 1;
        failed += u32::from(s == RecordStatus::FacilityFailure);
    }
    if n == 0 {
        return Err(ExperimentError::NoRuns);
    }
    Ok(failed as f64 / n as f64)
}

pub fn run_job(matrix: &ScenarioMatrix, job: &Job) -> RunRecord {
    let cell = &matrix.cells[job.cell];
    let cfg = matrix.params.config(cell.layout.clone(), job.controller, job.demand as f64, job.seed);
    let mut r = RunRecord {
        size: cell.name.clone(),
        demand: job.demand,
        controller: job.controller,
        rep: job.rep,
        seed: job.seed,
        status: RecordStatus::Error,
        arrivals: 0,
        exits: 0,
        throughput: None,
        failure_time: None,
        exits_in_window: 0,
        last_exit_time: None,
    };
    if let Ok(o) = run(&cfg) {
        r.status = o.status.into();
        r.arrivals = o.arrivals;
        r.exits = o.exited_count;
        r.throughput = throughput(&o);
        r.failure_time = o.failure_time;
        r.exits_in_window = o.exits_within_window;
        r.last_exit_time = o.last_exit_time;
    }
    r
}

/// Mean and sample standard deviation.
fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub size: String,
    pub demand: u32,
    pub controller: Controller,
    pub runs: u32,
    pub completed: u32,
    pub facility_failures: u32,
    pub time_caps: u32,
    pub errors: u32,
    pub failure_rate: f64,
    pub throughput_mean: Option<f64>,
    pub throughput_sd: Option<f64>,
    /// Exits inside the arrival window per hour of window, completed runs.
    pub window_throughput_mean: Option<f64>,
    /// Orchestrated minus isolated over replications where both completed.
    pub paired_delta_mean: Option<f64>,
    pub paired_delta_sd: Option<f64>,
    pub pairs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub base_seed: u64,
    pub replications: u32,
    pub cells: Vec<CellStats>,
    /// Mean over (size, demand) cells of their mean paired delta.
    pub overall_paired_delta: Option<f64>,
}

impl AggregateStats {
    pub fn cell(&self, size: &str, demand: u32, controller: Controller) -> Option<&CellStats> {
        self.cells.iter().find(|c| c.size == size && c.demand == demand && c.controller == controller)
    }
}

/// Statistics from run records. Groups keep the order in which they first
/// appear, so canonical records give canonical output.
pub fn aggregate(records: &[RunRecord], base_seed: u64, window: f64) -> AggregateStats {
    let mut order: Vec<(String, u32, Controller)> = Vec::new();
    let mut groups: BTreeMap<(String, u32, Controller), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.size.clone(), r.demand, r.controller);
        let g = groups.entry(key.clone()).or_default();
        if g.is_empty() {
            order.push(key);
        }
        g.push(r);
    }

    // paired deltas per (size, demand)
    let mut deltas: BTreeMap<(String, u32), Vec<f64>> = BTreeMap::new();
    for ((size, demand, c), rs) in &groups {
        if *c != Controller::Orchestrated {
            continue;
        }
        let Some(iso) = groups.get(&(size.clone(), *demand, Controller::Isolated)) else { continue };
        let iso: BTreeMap<u32, &RunRecord> = iso.iter().map(|r| (r.rep, *r)).collect();
        let d = deltas.entry((size.clone(), *demand)).or_default();
        for r in rs {
            if let (Some(a), Some(b)) = (r.throughput, iso.get(&r.rep).and_then(|i| i.throughput)) {
                d.push(a - b);
            }
        }
    }

    let cells: Vec<CellStats> = order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let count = |s| rs.iter().filter(|r| r.status == s).count() as u32;
            let tps: Vec<f64> = rs.iter().filter_map(|r| r.throughput).collect();
            let win: Vec<f64> = rs
                .iter()
                .filter(|r| r.status == RecordStatus::Completed)
                .map(|r| r.exits_in_window as f64 / (window / 3600.0))
                .collect();
            let (throughput_mean, throughput_sd) = mean_sd(&tps);
            let pair = deltas.get(&(key.0.clone(), key.1)).map(Vec::as_slice).unwrap_or(&[]);
            let (paired_delta_mean, paired_delta_sd) = mean_sd(pair);
            CellStats {
                runs: rs.len() as u32,
                completed: count(RecordStatus::Completed),
                facility_failures: count(RecordStatus::FacilityFailure),
                time_caps: count(RecordStatus::TimeCap),
                errors: count(RecordStatus::Error),
                failure_rate: failure_rate(rs.iter().map(|r| r.status)).expect("groups are nonempty"),
                throughput_mean,
                throughput_sd,
                window_throughput_mean: mean_sd(&win).0,
                paired_delta_mean,
                paired_delta_sd,
                pairs: pair.len() as u32,
                size: key.0,
                demand: key.1,
                controller: key.2,
            }
        })
        .collect();

    let means: Vec<f64> = deltas.values().filter_map(|d| mean_sd(d).0).collect();
    let replications = records.iter().map(|r| r.rep + 1).max().unwrap_or(0);
    AggregateStats { base_seed, replications, cells, overall_paired_delta: mean_sd(&means).0 }
}

#[derive(Debug, Clone)]
pub struct MatrixResult {
    pub records: Vec<RunRecord>,
    pub stats: AggregateStats,
}

/// Run every job on `workers` threads. With `out_dir`, records are appended
/// to `runs.partial.csv` as they finish; on success the canonical result
/// files are written and the partial file is removed.
pub fn run_matrix(matrix: &ScenarioMatrix, workers: usize, out_dir: Option<&Path>) -> Result<MatrixResult, ExperimentError> {
    matrix.validate()?;
    let partial = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(PARTIAL_RUNS_FILE);
            let file = File::create(&path).map_err(io_err(&path))?;
            Some(Mutex::new(csv::Writer::from_writer(file)))
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
    let jobs = matrix.jobs();
    let records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let r = run_job(matrix, job);
                if let Some(w) = &partial {
                    let mut w = w.lock().expect("writer lock");
                    // best effort: the partial file only matters if we get killed
                    let _ = w.serialize(&r).and_then(|_| w.flush().map_err(csv::Error::from));
                }
                r
            })
            .collect()
    });
    let stats = aggregate(&records, matrix.base_seed, matrix.params.window);
    if let Some(dir) = out_dir {
        drop(partial);
        write_runs_csv(&records, &dir.join(RUNS_FILE))?;
        write_summary_csv(&stats, &dir.join(SUMMARY_FILE))?;
        write_summary_json(&stats, &dir.join(SUMMARY_JSON_FILE))?;
        let p = dir.join(PARTIAL_RUNS_FILE);
        std::fs::remove_file(&p).map_err(io_err(&p))?;
    }
    Ok(MatrixResult { records, stats })
}

pub fn write_runs_csv(records: &[RunRecord], path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>, ExperimentError> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_summary_csv(stats: &AggregateStats, path: &Path) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    for c in &stats.cells {
        w.serialize(c)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<CellStats>, ExperimentError> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_summary_json(stats: &AggregateStats, path: &Path) -> Result<(), ExperimentError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut f, stats)?;
    writeln!(f).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(reps: u32) -> ScenarioMatrix {
        let mut m = ScenarioMatrix::default();
        m.cells.truncate(1);
        m.cells[0].demands = vec![6];
        m.replications = reps;
        m
    }

    fn record(controller: Controller, rep: u32, status: RecordStatus, tp: Option<f64>) -> RunRecord {
        RunRecord {
            size: "small".into(),
            demand: 60,
            controller,
            rep,
            seed: rep as u64,
            status,
            arrivals: 10,
            exits: 10,
            throughput: tp,
            failure_time: None,
            exits_in_window: 5,
            last_exit_time: None,
        }
    }

    #[test]
    fn throughput_examples() {
        assert_eq!(throughput_of(0, None), 0.0);
        assert_eq!(throughput_of(10, Some(5.0 * 3600.0)), 2.0);
    }

    #[test]
    fn failure_rate_examples() {
        assert_eq!(failure_rate(vec![RecordStatus::Completed; 30]).unwrap(), 0.0);
        let mut s = vec![RecordStatus::Completed; 7];
        s.extend([RecordStatus::FacilityFailure; 3]);
        assert_eq!(failure_rate(s).unwrap(), 0.3);
        assert!(matches!(failure_rate(Vec::new()), Err(ExperimentError::NoRuns)));
        // time caps are not facility failures
        assert_eq!(failure_rate([RecordStatus::TimeCap, RecordStatus::FacilityFailure]).unwrap(), 0.5);
    }

    #[test]
    fn default_matrix_has_540_runs() {
        let m = ScenarioMatrix::default();
        assert_eq!(m.run_count(), 540);
        assert_eq!(m.jobs().len(), 540);
    }

    #[test]
    fn seeds_are_paired_and_stable() {
        let m = tiny(3);
        let jobs = m.jobs();
        for rep in 0..3 {
            let seeds: Vec<u64> = jobs.iter().filter(|j| j.rep == rep).map(|j| j.seed).collect();
            assert_eq!(seeds.len(), 2);
            assert_eq!(seeds[0], seeds[1]);
        }
        let more = tiny(5).jobs();
        for j in &jobs {
            assert!(more.contains(j));
        }
        assert_ne!(replication_seed(1, "small", 60, 0), replication_seed(1, "small", 60, 1));
        assert_ne!(replication_seed(1, "small", 60, 0), replication_seed(1, "medium", 60, 0));
        assert_ne!(replication_seed(1, "small", 60, 0), replication_seed(2, "small", 60, 0));
    }

    #[test]
    fn aggregate_excludes_failed_runs_and_pairs_by_rep() {
        use Controller::*;
        let rs = vec![
            record(Orchestrated, 0, RecordStatus::Completed, Some(10.0)),
            record(Orchestrated, 1, RecordStatus::FacilityFailure, None),
            record(Orchestrated, 2, RecordStatus::Completed, Some(12.0)),
            record(Isolated, 0, RecordStatus::Completed, Some(9.0)),
            record(Isolated, 1, RecordStatus::Completed, Some(8.0)),
            record(Isolated, 2, RecordStatus::TimeCap, None),
        ];
        let s = aggregate(&rs, 0, 18000.0);
        let o = s.cell("small", 60, Orchestrated).unwrap();
        assert_eq!((o.runs, o.completed, o.facility_failures), (3, 2, 1));
        assert_eq!(o.throughput_mean, Some(11.0));
        assert!((o.failure_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(o.window_throughput_mean, Some(1.0));
        let i = s.cell("small", 60, Isolated).unwrap();
        assert_eq!((i.time_caps, i.failure_rate), (1, 0.0));
        assert_eq!(i.throughput_mean, Some(8.5));
        // only rep 0 completed under both
        assert_eq!((o.pairs, o.paired_delta_mean, o.paired_delta_sd), (1, Some(1.0), None));
        assert_eq!(s.overall_paired_delta, Some(1.0));
        assert_eq!(s.replications, 3);
    }

    #[test]
    fn zero_demand_matrix_completes_with_zero_throughput() {
        let mut m = ScenarioMatrix::default();
        for c in &mut m.cells {
            c.demands = vec![0];
        }
        m.replications = 1;
        let r = run_matrix(&m, 2, None).unwrap();
        assert_eq!(r.records.len(), 6);
        for rec in &r.records {
            assert_eq!(rec.status, RecordStatus::Completed);
            assert_eq!(rec.throughput, Some(0.0));
        }
    }

    #[test]
    fn files_round_trip_and_partial_is_removed() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(2);
        let r = run_matrix(&m, 2, Some(dir.path())).unwrap();
        assert!(!dir.path().join(PARTIAL_RUNS_FILE).exists());
        let back = read_runs_csv(&dir.path().join(RUNS_FILE)).unwrap();
        assert_eq!(back, r.records);
        assert_eq!(read_summary_csv(&dir.path().join(SUMMARY_FILE)).unwrap(), r.stats.cells);
        let json: AggregateStats =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_JSON_FILE)).unwrap()).unwrap();
        assert_eq!(json, r.stats);
    }

    #[test]
    fn invalid_params_are_rejected_before_running() {
        let mut m = tiny(1);
        m.params.window = 0.0;
        assert!(matches!(run_matrix(&m, 1, None), Err(ExperimentError::Config(_))));
    }
}
