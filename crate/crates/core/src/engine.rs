//! One simulation run: arrivals, movement, service, triggers, termination.
//!
//! Time is discrete. One tick is the time needed to drive one cell at the
//! fixed yard speed. Within a tick the engine
//!
//! 1. moves every on-grid vehicle one step along its committed path,
//! 2. handles vehicles that reached their goal (gate entry or exit),
//! 3. finishes services that end this tick,
//! 4. tows failed inspections to parking once a slot is free,
//! 5. admits new arrivals to the entrance queue,
//! 6. (orchestrated) re-assigns and re-plans everyone if anything triggered,
//! 7. lets queued or finished vehicles onto the grid when their cell is free,
//! 8. retries vehicles that are holding their cell for lack of a path.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{replan, AssignError, StationLoads, Trigger, WorldView};
use crate::baseline::{next_target, on_gate_arrival, GateDecision, LoopPosition};
use crate::pathing::{commit_path, release_future, PathPlanner, ReservationTable, SpaceTimePath, Tick};
use crate::scoring::{rank_vehicles, ScoreWeights};
use crate::vehicle::{Position, StationSet, Target, Vehicle, VehicleId, VehicleStatus};
use crate::yard::{validate_layout, Cell, DistanceTable, StationKind, Violation, YardLayout};

pub const DEFAULT_WINDOW_S: f64 = 5.0 * 3600.0;
pub const DEFAULT_MAX_SIM_TIME_S: f64 = 24.0 * 3600.0;
pub const DEFAULT_SPEED_KMH: f64 = 16.1;
pub const DEFAULT_INSPECTION_FAIL_RATE: f64 = 0.005;
pub const MIN_SERVICE_S: f64 = 60.0;
pub const MAX_CHARGE_S: f64 = 7200.0;
pub const TRUST_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Orchestrated,
    Isolated,
}

impl Controller {
    pub const ALL: [Controller; 2] = [Controller::Orchestrated, Controller::Isolated];

    pub fn name(self) -> &'static str {
        match self {
            Controller::Orchestrated => "orchestrated",
            Controller::Isolated => "isolated",
        }
    }
}

impl fmt::Display for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Controller {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Controller::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown controller `{s}` (expected orchestrated or isolated)"))
    }
}

/// Normal distribution parameters in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceTime {
    pub mean: f64,
    pub sd: f64,
}

impl ServiceTime {
    pub const fn minutes(mean: f64, sd: f64) -> Self {
        ServiceTime { mean: mean * 60.0, sd: sd * 60.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceDistributions {
    pub charging: ServiceTime,
    pub inspection: ServiceTime,
    pub cleaning: ServiceTime,
    pub loading: ServiceTime,
    pub parking: ServiceTime,
}

impl Default for ServiceDistributions {
    fn default() -> Self {
        ServiceDistributions {
            charging: ServiceTime::minutes(60.0, 30.0),
            inspection: ServiceTime::minutes(10.0, 2.0),
            cleaning: ServiceTime::minutes(20.0, 2.0),
            loading: ServiceTime::minutes(20.0, 2.0),
            parking: ServiceTime::minutes(2.0, 2.0),
        }
    }
}

impl ServiceDistributions {
    pub fn get(&self, kind: StationKind) -> ServiceTime {
        match kind {
            StationKind::Charging => self.charging,
            StationKind::Inspection => self.inspection,
            StationKind::Cleaning => self.cleaning,
            StationKind::Loading => self.loading,
            StationKind::Parking => self.parking,
        }
    }

    /// Sum of the circuit means, seconds.
    pub fn circuit_mean(&self) -> f64 {
        StationKind::CIRCUIT.iter().map(|&k| self.get(k).mean).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub layout: Arc<YardLayout>,
    pub controller: Controller,
    /// Expected number of arrivals over the window.
    pub demand: f64,
    /// Arrival window, seconds.
    pub window: f64,
    pub seed: u64,
    pub service: ServiceDistributions,
    pub inspection_fail_rate: f64,
    pub speed_kmh: f64,
    pub max_sim_time: f64,
    pub weights: ScoreWeights,
    /// Ticks a path keeps its goal reserved when the goal is plain road.
    pub dwell_margin: u32,
    /// Berths taken by occupants outside the simulation for the whole run.
    pub preoccupied: [u32; 5],
    /// Replaces the sampled arrival process when set. Seconds, sorted.
    pub arrival_times: Option<Vec<f64>>,
}

impl SimConfig {
    pub fn new(layout: Arc<YardLayout>, controller: Controller, demand: f64, seed: u64) -> Self {
        SimConfig {
            layout,
            controller,
            demand,
            window: DEFAULT_WINDOW_S,
            seed,
            service: ServiceDistributions::default(),
            inspection_fail_rate: DEFAULT_INSPECTION_FAIL_RATE,
            speed_kmh: DEFAULT_SPEED_KMH,
            max_sim_time: DEFAULT_MAX_SIM_TIME_S,
            weights: ScoreWeights::default(),
            dwell_margin: 1,
            preoccupied: [0; 5],
            arrival_times: None,
        }
    }

    /// Seconds per tick.
    pub fn tick_seconds(&self) -> f64 {
        self.layout.cell_size_m / (self.speed_kmh / 3.6)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let violations = validate_layout(&self.layout);
        if !violations.is_empty() {
            return Err(ConfigError::Layout(violations));
        }
        let nonneg = |name: &'static str, x: f64| {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Negative(name, x))
            }
        };
        let positive = |name: &'static str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::NotPositive(name, x))
            }
        };
        nonneg("demand", self.demand)?;
        positive("window", self.window)?;
        positive("speed_kmh", self.speed_kmh)?;
        positive("max_sim_time", self.max_sim_time)?;
        for kind in StationKind::ALL {
            let d = self.service.get(kind);
            nonneg("service mean", d.mean)?;
            nonneg("service sd", d.sd)?;
        }
        if !(0.0..=1.0).contains(&self.inspection_fail_rate) {
            return Err(ConfigError::FailRate(self.inspection_fail_rate));
        }
        for w in [self.weights.charge, self.weights.circuit, self.weights.lateness, self.weights.trust] {
            if !w.is_finite() {
                return Err(ConfigError::Weights);
            }
        }
        for kind in StationKind::ALL {
            if self.preoccupied[kind.index()] > self.layout.capacity(kind) {
                return Err(ConfigError::Preoccupied(kind));
            }
        }
        if let Some(times) = &self.arrival_times {
            let sorted = times.windows(2).all(|w| w[0] <= w[1]);
            if !sorted || times.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return Err(ConfigError::ArrivalTimes);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid layout: {0:?}")]
    Layout(Vec<Violation>),
    #[error("{0} must be a finite non-negative number, got {1}")]
    Negative(&'static str, f64),
    #[error("{0} must be positive, got {1}")]
    NotPositive(&'static str, f64),
    #[error("inspection_fail_rate must lie in [0, 1], got {0}")]
    FailRate(f64),
    #[error("score weights must be finite")]
    Weights,
    #[error("more preoccupied {0} berths than the layout has")]
    Preoccupied(StationKind),
    #[error("arrival_times must be sorted, finite and non-negative")]
    ArrivalTimes,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// No conflict-free route right now. Handled inside the engine, never returned by [`run`].
    #[error(transparent)]
    NoRoute(#[from] crate::pathing::PathError),
    /// Engine bookkeeping went wrong; always a bug.
    #[error("internal error at tick {tick}: {msg}")]
    Internal { tick: Tick, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    FacilityFailure,
    TimeCap,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::FacilityFailure => "facility_failure",
            RunStatus::TimeCap => "time_cap",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [RunStatus::Completed, RunStatus::FacilityFailure, RunStatus::TimeCap]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown run status `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrived,
    EnteredGrid,
    Assigned,
    GateFull,
    StationEntered,
    Parked,
    ServiceCompleted,
    LeftStation,
    Held,
    InspectionFailed,
    Impounded,
    Exited,
    Stranded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: Tick,
    pub vehicle: VehicleId,
    pub kind: EventKind,
    pub detail: String,
}

/// Newline-delimited JSON, one event per line.
pub fn write_event_log<W: Write>(events: &[Event], mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Counters of properties that must never be violated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub vertex_conflicts: u64,
    pub swap_conflicts: u64,
    pub teleports: u64,
    pub capacity_violations: u64,
    /// Most vehicles on the grid at once.
    pub peak_on_grid: u32,
}

impl Audit {
    pub fn is_clean(&self) -> bool {
        self.vertex_conflicts == 0 && self.swap_conflicts == 0 && self.teleports == 0 && self.capacity_violations == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub arrivals: u32,
    pub exited_count: u32,
    pub impounded: u32,
    pub stranded: u32,
    /// Vehicles still inside when the run stopped.
    pub in_yard: u32,
    pub exits_within_window: u32,
    pub failure_time: Option<f64>,
    pub last_exit_time: Option<f64>,
    pub ticks: Tick,
    pub tick_seconds: f64,
    pub audit: Audit,
    pub events: Vec<Event>,
}

impl RunOutcome {
    pub fn is_conserved(&self) -> bool {
        self.arrivals == self.exited_count + self.impounded + self.stranded + self.in_yard
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InspectionOutcome {
    Pass,
    Fail,
}

const STREAM_ARRIVALS: u64 = 1;
const STREAM_SERVICE: u64 = 2;
const STREAM_TRUST: u64 = 3;
const STREAM_INSPECTION: u64 = 4;
const STREAM_PARKING: u64 = 5;

/// Ticks a vehicle stays held before it gives way by pulling aside.
const EVADE_AFTER: Tick = 30;
/// Nearest free cells tried when pulling aside.
const EVADE_CANDIDATES: usize = 8;

/// Independent stream `tag` for item `index` of the run seeded with `seed`.
pub fn rng_stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | index);
    rng
}

/// Homogeneous Poisson arrivals over `[0, window)`, seconds, sorted.
pub fn sample_arrivals<R: Rng + ?Sized>(demand: f64, window: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::new();
    if demand <= 0.0 {
        return out;
    }
    let gap = Exp::new(demand / window).expect("rate is positive and finite");
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t >= window {
            return out;
        }
        out.push(t);
    }
}

/// Seconds, clamped to at least one minute (and at most two hours for charging).
/// The engine rounds up to whole ticks when scheduling.
pub fn sample_service_time<R: Rng + ?Sized>(kind: StationKind, dists: &ServiceDistributions, rng: &mut R) -> f64 {
    let d = dists.get(kind);
    let x = Normal::new(d.mean, d.sd).expect("validated parameters").sample(rng);
    if kind == StationKind::Charging {
        x.clamp(MIN_SERVICE_S, MAX_CHARGE_S)
    } else {
        x.max(MIN_SERVICE_S)
    }
}

pub fn inspection_outcome<R: Rng + ?Sized>(fail_rate: f64, rng: &mut R) -> InspectionOutcome {
    if rng.random::<f64>() < fail_rate {
        InspectionOutcome::Fail
    } else {
        InspectionOutcome::Pass
    }
}

pub fn seconds_to_ticks(seconds: f64, tick_seconds: f64) -> Tick {
    (seconds / tick_seconds - 1e-9).ceil().max(0.0) as Tick
}

/// Mean service time of the circuit plus the shortest drive
/// entrance → {charging, inspection, cleaning} in the best order → loading → exit.
pub fn expected_circuit_time(layout: &YardLayout, service: &ServiceDistributions, tick_seconds: f64) -> f64 {
    let distances = DistanceTable::new(layout);
    let d = |from: Cell, to: StationKind| distances.to_gate(to).get(layout, from).unwrap_or(u32::MAX / 8) as u64;
    let gate = |k: StationKind| layout.gate(k);
    use StationKind::*;
    let perms = [
        [Charging, Inspection, Cleaning],
        [Charging, Cleaning, Inspection],
        [Inspection, Charging, Cleaning],
        [Inspection, Cleaning, Charging],
        [Cleaning, Charging, Inspection],
        [Cleaning, Inspection, Charging],
    ];
    let to_exit = distances.to_exit().get(layout, gate(Loading)).unwrap_or(u32::MAX / 8) as u64;
    let best = perms
        .iter()
        .map(|p| d(layout.entrance, p[0]) + d(gate(p[0]), p[1]) + d(gate(p[1]), p[2]) + d(gate(p[2]), Loading) + to_exit)
        .min()
        .expect("six permutations");
    service.circuit_mean() + best as f64 * tick_seconds
}

#[derive(Debug, Clone)]
struct Agent {
    /// Service ticks per circuit kind, drawn at arrival.
    service: [Tick; 4],
    fails_inspection: bool,
    park_rng: ChaCha8Rng,
    /// Holding its current cell open-endedly for lack of a path.
    held: bool,
    /// Tick at which the vehicle reaches the gate or exit it is heading for.
    /// Isolated paths run on past the gate, so this can be before the path ends.
    goal_tick: Tick,
    /// Off the grid (queued or inside a station) and waiting to get on.
    pending: bool,
    /// Failed inspection, waiting in the inspection berth for a parking slot.
    awaiting_tow: bool,
    found_full: StationSet,
    held_since: Tick,
    /// Pulling aside to break a standoff; `goal_tick` is the side cell.
    evading: bool,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    layout: &'a YardLayout,
    distances: DistanceTable,
    planner: PathPlanner<'a>,
    table: ReservationTable,
    loads: StationLoads,
    vehicles: Vec<Vehicle>,
    agents: Vec<Agent>,
    /// Ids not yet exited, impounded or stranded, ascending.
    active: Vec<u32>,
    arrivals: Vec<f64>,
    next_arrival: usize,
    completions: BinaryHeap<Reverse<(Tick, u32)>>,
    triggers: Vec<Trigger>,
    now: Tick,
    dt: f64,
    expected: f64,
    events: Vec<Event>,
    audit: Audit,
    exited: u32,
    impounded: u32,
    stranded: u32,
    exits_in_window: u32,
    last_exit: Option<Tick>,
    failure: Option<Tick>,
}

/// Simulate one run. Identical configurations give identical outcomes.
pub fn run(config: &SimConfig) -> Result<RunOutcome, SimError> {
    config.validate()?;
    let mut engine = Engine::new(config);
    let max_tick = seconds_to_ticks(config.max_sim_time, engine.dt);
    let status = loop {
        engine.step()?;
        if engine.failure.is_some() {
            break RunStatus::FacilityFailure;
        }
        if engine.next_arrival == engine.arrivals.len() && engine.active.is_empty() {
            break RunStatus::Completed;
        }
        if engine.now >= max_tick {
            break RunStatus::TimeCap;
        }
        engine.now += 1;
    };
    Ok(engine.finish(status))
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig) -> Self {
        let layout: &YardLayout = &cfg.layout;
        let dt = cfg.tick_seconds();
        let arrivals = match &cfg.arrival_times {
            Some(times) => times.clone(),
            None => sample_arrivals(cfg.demand, cfg.window, &mut rng_stream(cfg.seed, STREAM_ARRIVALS, 0)),
        };
        let mut loads = StationLoads::from_layout(layout);
        for kind in StationKind::ALL {
            loads.get_mut(kind).occupied = cfg.preoccupied[kind.index()];
        }
        Engine {
            cfg,
            layout,
            distances: DistanceTable::new(layout),
            planner: PathPlanner::new(layout, cfg.dwell_margin),
            table: ReservationTable::new(),
            loads,
            vehicles: Vec::with_capacity(arrivals.len()),
            agents: Vec::with_capacity(arrivals.len()),
            active: Vec::new(),
            arrivals,
            next_arrival: 0,
            completions: BinaryHeap::new(),
            triggers: Vec::new(),
            now: 0,
            dt,
            expected: expected_circuit_time(layout, &cfg.service, dt),
            events: Vec::new(),
            audit: Audit::default(),
            exited: 0,
            impounded: 0,
            stranded: 0,
            exits_in_window: 0,
            last_exit: None,
            failure: None,
        }
    }

    fn finish(self, status: RunStatus) -> RunOutcome {
        let seconds = |t: Tick| t as f64 * self.dt;
        RunOutcome {
            status,
            arrivals: self.vehicles.len() as u32,
            exited_count: self.exited,
            impounded: self.impounded,
            stranded: self.stranded,
            in_yard: self.active.iter().filter(|&&id| !self.vehicles[id as usize].status.is_terminal()).count() as u32,
            exits_within_window: self.exits_in_window,
            failure_time: self.failure.map(seconds),
            last_exit_time: self.last_exit.map(seconds),
            ticks: self.now,
            tick_seconds: self.dt,
            audit: self.audit,
            events: self.events,
        }
    }

    fn internal(&self, msg: impl fmt::Display) -> SimError {
        SimError::Internal { tick: self.now, msg: msg.to_string() }
    }

    fn log(&mut self, id: u32, kind: EventKind, detail: impl Into<String>) {
        self.events.push(Event { tick: self.now, vehicle: VehicleId(id), kind, detail: detail.into() });
    }

    fn orchestrated(&self) -> bool {
        self.cfg.controller == Controller::Orchestrated
    }

    fn clock(&self) -> f64 {
        self.now as f64 * self.dt
    }

    fn step(&mut self) -> Result<(), SimError> {
        if self.now > 0 {
            self.advance();
        }
        if self.now.is_multiple_of(64) {
            self.table.prune_before(self.now);
        }
        self.goal_arrivals()?;
        if self.failure.is_some() {
            return Ok(());
        }
        self.service_completions()?;
        self.resolve_tows()?;
        self.admit_arrivals();
        if self.orchestrated() && !self.triggers.is_empty() {
            self.replan_all()?;
            if self.failure.is_some() {
                return Ok(());
            }
        }
        self.try_spawns()?;
        self.retry_held()?;
        if self.failure.is_some() {
            return Ok(());
        }
        for (_, l) in self.loads.iter() {
            if l.used() > l.berths {
                self.audit.capacity_violations += 1;
            }
        }
        self.active.retain(|&id| !self.vehicles[id as usize].status.is_terminal());
        Ok(())
    }

    /// Move every on-grid vehicle to its planned cell for `now` and audit.
    fn advance(&mut self) {
        let now = self.now;
        let mut occupied: FxHashMap<Cell, u32> = FxHashMap::default();
        let mut moves: FxHashSet<(Cell, Cell)> = FxHashSet::default();
        for &id in &self.active {
            let (v, a) = (&mut self.vehicles[id as usize], &self.agents[id as usize]);
            let Position::OnGrid(from) = v.position else { continue };
            let to = if a.held {
                from
            } else {
                match &v.planned_path {
                    Some(p) => p.cell_at(now).unwrap_or(from),
                    None => from,
                }
            };
            if to != from {
                if !from.is_adjacent(to) {
                    self.audit.teleports += 1;
                }
                if moves.contains(&(to, from)) {
                    self.audit.swap_conflicts += 1;
                }
                moves.insert((from, to));
            }
            if occupied.insert(to, id).is_some() {
                self.audit.vertex_conflicts += 1;
            }
            v.position = Position::OnGrid(to);
        }
        self.audit.peak_on_grid = self.audit.peak_on_grid.max(occupied.len() as u32);
    }

    fn goal_arrivals(&mut self) -> Result<(), SimError> {
        let arrived: Vec<u32> = self
            .active
            .iter()
            .copied()
            .filter(|&id| self.at_goal_now(id))
            .collect();
        for id in arrived {
            // an earlier arrival may already have bumped this one through its goal
            if !self.at_goal_now(id) {
                continue;
            }
            self.reach_goal(id)?;
            if self.failure.is_some() {
                break;
            }
        }
        Ok(())
    }

    fn at_goal_now(&self, id: u32) -> bool {
        let v = &self.vehicles[id as usize];
        let a = &self.agents[id as usize];
        !a.held
            && a.goal_tick == self.now
            && matches!((&v.planned_path, v.position),
                (Some(p), Position::OnGrid(c)) if p.cell_at(self.now) == Some(c))
    }

    /// The vehicle stands on the cell of its target at `now`.
    fn reach_goal(&mut self, id: u32) -> Result<(), SimError> {
        let target = self.vehicles[id as usize].assignment.ok_or_else(|| self.internal("arrived without a target"))?;
        self.release_after_now(id);
        if self.agents[id as usize].evading {
            self.agents[id as usize].evading = false;
            return self.plan_or_hold(id);
        }
        let kind = match target {
            Target::Exit => {
                self.depart(id);
                return Ok(());
            }
            Target::Station(k) => k,
        };
        if self.orchestrated() {
            self.loads.enter_from_inbound(kind).map_err(|e| self.internal(e))?;
            self.enter_station(id, kind);
            return Ok(());
        }
        match on_gate_arrival(kind, self.loads.get(kind)) {
            GateDecision::Enter => {
                self.loads.enter_direct(kind).map_err(|e| self.internal(e))?;
                self.enter_station(id, kind);
            }
            GateDecision::Continue => {
                self.log(id, EventKind::GateFull, kind.name());
                let a = &mut self.agents[id as usize];
                a.found_full.insert(kind);
                let found_full = a.found_full;
                let v = &mut self.vehicles[id as usize];
                let next = next_target(v, LoopPosition::At(kind), found_full);
                v.assignment = Some(Target::Station(next));
                self.plan_or_hold(id)?;
            }
            GateDecision::Stranded => {
                let v = &mut self.vehicles[id as usize];
                v.status = VehicleStatus::Stranded;
                self.stranded += 1;
                self.failure = Some(self.now);
                self.log(id, EventKind::Stranded, kind.name());
            }
        }
        Ok(())
    }

    fn depart(&mut self, id: u32) {
        let v = &mut self.vehicles[id as usize];
        v.position = Position::Departed;
        v.status = VehicleStatus::Exited;
        self.exited += 1;
        self.last_exit = Some(self.now);
        if self.clock() <= self.cfg.window {
            self.exits_in_window += 1;
        }
        self.log(id, EventKind::Exited, "");
    }

    fn enter_station(&mut self, id: u32, kind: StationKind) {
        let now = self.now;
        let dt = self.dt;
        let orchestrated = self.orchestrated();
        let (v, a) = (&mut self.vehicles[id as usize], &mut self.agents[id as usize]);
        v.position = Position::InStation(kind);
        v.planned_path = None;
        a.found_full = StationSet::EMPTY;
        if kind == StationKind::Parking {
            v.status = VehicleStatus::Parked;
            if !orchestrated {
                let dwell = sample_service_time(StationKind::Parking, &self.cfg.service, &mut a.park_rng);
                self.completions.push(Reverse((now + seconds_to_ticks(dwell, dt), id)));
            }
            self.log(id, EventKind::Parked, "");
        } else {
            v.status = VehicleStatus::Serving;
            let ticks = if kind == StationKind::Charging {
                seconds_to_ticks(v.remaining_charge_time, dt)
            } else {
                a.service[kind.index()]
            };
            self.completions.push(Reverse((now + ticks, id)));
            self.log(id, EventKind::StationEntered, kind.name());
        }
    }

    fn service_completions(&mut self) -> Result<(), SimError> {
        while let Some(&Reverse((tick, id))) = self.completions.peek() {
            if tick > self.now {
                break;
            }
            self.completions.pop();
            let Position::InStation(kind) = self.vehicles[id as usize].position else {
                return Err(self.internal(format!("v{id} finished service outside a station")));
            };
            if kind == StationKind::Parking {
                // isolated parking dwell is over: resume the loop
                let v = &mut self.vehicles[id as usize];
                let next = next_target(v, LoopPosition::At(StationKind::Parking), StationSet::EMPTY);
                v.assignment = Some(Target::Station(next));
                self.agents[id as usize].pending = true;
                continue;
            }
            self.vehicles[id as usize].complete(kind);
            self.log(id, EventKind::ServiceCompleted, kind.name());
            if self.orchestrated() {
                self.triggers.push(Trigger::StationCompleted(VehicleId(id), kind));
            }
            if kind == StationKind::Inspection && self.agents[id as usize].fails_inspection {
                self.log(id, EventKind::InspectionFailed, "");
                self.agents[id as usize].awaiting_tow = true;
                continue;
            }
            self.loads.leave(kind).map_err(|e| self.internal(e))?;
            let orchestrated = self.orchestrated();
            let (v, a) = (&mut self.vehicles[id as usize], &mut self.agents[id as usize]);
            v.status = VehicleStatus::Moving;
            a.pending = true;
            v.assignment = if orchestrated {
                None
            } else if v.circuit_complete() {
                Some(Target::Exit)
            } else {
                Some(Target::Station(next_target(v, LoopPosition::At(kind), StationSet::EMPTY)))
            };
        }
        self.resolve_tows()
    }

    /// Failed vehicles take a parking slot for good as soon as one is free.
    fn resolve_tows(&mut self) -> Result<(), SimError> {
        let waiting: Vec<u32> = self.active.iter().copied().filter(|&id| self.agents[id as usize].awaiting_tow).collect();
        for id in waiting {
            if !self.loads.get(StationKind::Parking).has_capacity() {
                break;
            }
            self.loads.add_permanent_hold(StationKind::Parking).map_err(|e| self.internal(e))?;
            self.loads.leave(StationKind::Inspection).map_err(|e| self.internal(e))?;
            self.agents[id as usize].awaiting_tow = false;
            let v = &mut self.vehicles[id as usize];
            v.status = VehicleStatus::ImpoundedInParking;
            v.position = Position::InStation(StationKind::Parking);
            v.assignment = None;
            self.impounded += 1;
            self.log(id, EventKind::Impounded, "");
            if self.orchestrated() {
                self.triggers.push(Trigger::CapacityReleased(StationKind::Inspection));
            }
        }
        Ok(())
    }

    fn admit_arrivals(&mut self) {
        while let Some(&t) = self.arrivals.get(self.next_arrival) {
            if seconds_to_ticks(t, self.dt) > self.now {
                break;
            }
            let id = self.vehicles.len() as u32;
            let seed = self.cfg.seed;
            let mut service_rng = rng_stream(seed, STREAM_SERVICE, id as u64);
            let charge = sample_service_time(StationKind::Charging, &self.cfg.service, &mut service_rng);
            let mut service = [0; 4];
            for kind in [StationKind::Inspection, StationKind::Cleaning, StationKind::Loading] {
                service[kind.index()] =
                    seconds_to_ticks(sample_service_time(kind, &self.cfg.service, &mut service_rng), self.dt);
            }
            let trust = rng_stream(seed, STREAM_TRUST, id as u64).random_range(0.0..=TRUST_MAX);
            let fails = inspection_outcome(self.cfg.inspection_fail_rate, &mut rng_stream(seed, STREAM_INSPECTION, id as u64))
                == InspectionOutcome::Fail;
            let mut v = Vehicle::new(VehicleId(id), t, charge, trust);
            if !self.orchestrated() {
                v.assignment = Some(Target::Station(next_target(&v, LoopPosition::Entrance, StationSet::EMPTY)));
            }
            self.vehicles.push(v);
            self.agents.push(Agent {
                service,
                fails_inspection: fails,
                park_rng: rng_stream(seed, STREAM_PARKING, id as u64),
                held: false,
                goal_tick: 0,
                pending: true,
                awaiting_tow: false,
                found_full: StationSet::EMPTY,
                held_since: 0,
                evading: false,
            });
            self.active.push(id);
            self.next_arrival += 1;
            self.log(id, EventKind::Arrived, format!("{t:.1}"));
            if self.orchestrated() {
                self.triggers.push(Trigger::NewVehicleEntered(VehicleId(id)));
            }
        }
    }

    fn goal_cell(&self, id: u32) -> Result<Cell, SimError> {
        match self.vehicles[id as usize].assignment {
            Some(Target::Exit) => Ok(self.layout.exit),
            Some(Target::Station(k)) => Ok(self.layout.gate(k)),
            None => Err(self.internal(format!("v{id} has no target"))),
        }
    }

    /// Plan a route from `start` at `now`. Isolated vehicles heading for a
    /// circuit station also book the onward leg they would take if the station
    /// turns out to be full; it is released again if they get in.
    fn route(&mut self, id: u32, start: Cell) -> Result<(SpaceTimePath, Tick), SimError> {
        let agent = VehicleId(id);
        let goal = self.goal_cell(id)?;
        let first = self.planner.plan(&self.table, agent, start, goal, self.now).map_err(SimError::NoRoute)?;
        let at_gate = first.arrival_tick();
        let v = &self.vehicles[id as usize];
        let kind = match v.assignment {
            Some(Target::Station(k)) if !self.orchestrated() && k != StationKind::Parking && !first.is_empty() => k,
            _ => return Ok((first, at_gate)),
        };
        let mut full = self.agents[id as usize].found_full;
        full.insert(kind);
        let onward = self.layout.gate(next_target(v, LoopPosition::At(kind), full));
        match self.planner.plan(&self.table, agent, goal, onward, at_gate) {
            Ok(second) if !second.is_empty() => {
                let mut steps = first.steps;
                steps.extend_from_slice(&second.steps[1..]);
                Ok((SpaceTimePath { start_tick: first.start_tick, steps, dwell: second.dwell }, at_gate))
            }
            _ => Ok((first, at_gate)),
        }
    }

    /// Commit a planned route. Returns whether the vehicle is already at its goal.
    fn install(&mut self, id: u32, path: SpaceTimePath, goal_tick: Tick) -> Result<bool, SimError> {
        commit_path(&mut self.table, VehicleId(id), &path).map_err(|e| self.internal(e))?;
        let a = &mut self.agents[id as usize];
        a.held = false;
        a.evading = false;
        a.goal_tick = goal_tick;
        self.vehicles[id as usize].planned_path = Some(path);
        Ok(goal_tick == self.now)
    }

    /// Drop everything `id` has reserved after `now`.
    fn release_after_now(&mut self, id: u32) {
        let agent = VehicleId(id);
        let Position::OnGrid(c) = self.vehicles[id as usize].position else { return };
        if let Some(p) = self.vehicles[id as usize].planned_path.take() {
            release_future(&mut self.table, agent, &p, self.now + 1);
        }
        self.table.release_vertex(agent, c, self.now + 1);
        if self.agents[id as usize].held {
            self.table.release_hold(agent, c);
            self.table.reserve_vertex(agent, c, self.now).ok();
            self.agents[id as usize].held = false;
        }
    }

    /// Plan from the current cell at `now`. Without a path the vehicle holds
    /// its cell and anyone whose plan crosses that cell is re-planned.
    fn plan_or_hold(&mut self, id: u32) -> Result<(), SimError> {
        let mut work = vec![id];
        let mut at_goal = Vec::new();
        while let Some(id) = work.pop() {
            let agent = VehicleId(id);
            let Position::OnGrid(c) = self.vehicles[id as usize].position else {
                return Err(self.internal(format!("v{id} planned while off the grid")));
            };
            let goal = self.goal_cell(id)?;
            match self.route(id, c) {
                Ok((path, goal_tick)) => {
                    if self.install(id, path, goal_tick)? {
                        at_goal.push(id);
                    }
                }
                Err(SimError::NoRoute(_)) => {
                    for other in self.table.hold_conflicts(agent, c, self.now) {
                        if matches!(self.vehicles[other.0 as usize].position, Position::OnGrid(_)) {
                            self.release_after_now(other.0);
                            work.push(other.0);
                        }
                    }
                    self.table.hold(agent, c, self.now).map_err(|e| self.internal(e))?;
                    self.vehicles[id as usize].planned_path = None;
                    if !self.agents[id as usize].held {
                        self.agents[id as usize].held = true;
                        self.agents[id as usize].held_since = self.now;
                        self.log(id, EventKind::Held, format!("{c} -> {goal}"));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        for id in at_goal {
            if self.at_goal_now(id) {
                self.reach_goal(id)?;
                if self.failure.is_some() {
                    break;
                }
            }
        }
        Ok(())
    }

    /// One orchestrated replanning pass for all triggers of this tick.
    fn replan_all(&mut self) -> Result<(), SimError> {
        let trigger = self.triggers[0];
        self.triggers.clear();
        let mut world = WorldView {
            layout: self.layout,
            distances: &self.distances,
            loads: self.loads,
            clock: self.clock(),
            expected_circuit_time: self.expected,
            weights: self.cfg.weights,
        };
        let outcome = match replan(trigger, &mut world, &self.vehicles) {
            Ok(o) => o,
            Err(AssignError::AssignmentImpossible(vid)) => {
                let v = &mut self.vehicles[vid.0 as usize];
                v.status = VehicleStatus::Stranded;
                self.stranded += 1;
                self.failure = Some(self.now);
                self.log(vid.0, EventKind::Stranded, "all needed stations and parking full");
                return Ok(());
            }
            Err(e) => return Err(self.internal(e)),
        };
        self.loads = world.loads;

        let mut on_grid = Vec::new();
        for &(vid, target) in &outcome.assignments {
            let id = vid.0;
            let v = &mut self.vehicles[id as usize];
            let changed = v.assignment != Some(target);
            v.assignment = Some(target);
            if v.status == VehicleStatus::Parked {
                self.agents[id as usize].pending = target != Target::Station(StationKind::Parking);
            }
            if matches!(v.position, Position::OnGrid(_)) {
                on_grid.push(id);
            }
            if changed {
                self.log(id, EventKind::Assigned, target.to_string());
            }
        }

        // Re-plan on-grid vehicles in priority order. Everyone first keeps the
        // cell it stands on for the next tick so it always has somewhere to be.
        for &id in &on_grid {
            self.release_after_now(id);
        }
        for &id in &on_grid {
            let Position::OnGrid(c) = self.vehicles[id as usize].position else { unreachable!() };
            self.table.reserve_vertex(VehicleId(id), c, self.now + 1).map_err(|e| self.internal(e))?;
        }
        for &id in &on_grid {
            let Position::OnGrid(c) = self.vehicles[id as usize].position else { continue };
            if self.agents[id as usize].held || self.vehicles[id as usize].planned_path.is_some() {
                // already handled as part of someone else's hold
                continue;
            }
            self.table.release_vertex(VehicleId(id), c, self.now + 1);
            self.plan_or_hold(id)?;
            if self.failure.is_some() {
                break;
            }
        }
        Ok(())
    }

    /// Put pending vehicles on the grid where their entry cell is free.
    fn try_spawns(&mut self) -> Result<(), SimError> {
        let pending: Vec<u32> = self.active.iter().copied().filter(|&id| self.agents[id as usize].pending).collect();
        if pending.is_empty() {
            return Ok(());
        }
        let order: Vec<u32> = if self.orchestrated() {
            rank_vehicles(pending.iter().map(|&id| &self.vehicles[id as usize]), self.clock(), self.expected, &self.cfg.weights)
                .into_iter()
                .map(|s| s.id.0)
                .collect()
        } else {
            pending
        };
        for id in order {
            let v = &self.vehicles[id as usize];
            if v.assignment.is_none() {
                continue;
            }
            let (cell, from) = match v.position {
                Position::Queued => (self.layout.entrance, None),
                Position::InStation(k) => (self.layout.gate(k), Some(k)),
                _ => return Err(self.internal(format!("v{id} pending while on the grid"))),
            };
            if self.table.vertex_owner(cell, self.now).is_some() {
                continue;
            }
            let (path, goal_tick) = match self.route(id, cell) {
                Ok(r) => r,
                Err(SimError::NoRoute(_)) => continue,
                Err(e) => return Err(e),
            };
            let at_goal = self.install(id, path, goal_tick)?;
            let was_parked = self.vehicles[id as usize].status == VehicleStatus::Parked;
            let v = &mut self.vehicles[id as usize];
            v.position = Position::OnGrid(cell);
            v.status = VehicleStatus::Moving;
            self.agents[id as usize].pending = false;
            match from {
                None => self.log(id, EventKind::EnteredGrid, ""),
                Some(k) => {
                    if was_parked {
                        self.loads.leave(StationKind::Parking).map_err(|e| self.internal(e))?;
                    }
                    self.log(id, EventKind::LeftStation, k.name());
                }
            }
            if at_goal {
                self.reach_goal(id)?;
                if self.failure.is_some() {
                    break;
                }
            }
        }
        Ok(())
    }

    fn retry_held(&mut self) -> Result<(), SimError> {
        let held: Vec<u32> = self.active.iter().copied().filter(|&id| self.agents[id as usize].held).collect();
        for id in held {
            if !self.agents[id as usize].held {
                continue;
            }
            let agent = VehicleId(id);
            let Position::OnGrid(c) = self.vehicles[id as usize].position else { continue };
            self.table.release_hold(agent, c);
            match self.route(id, c) {
                Ok((path, goal_tick)) => {
                    if self.install(id, path, goal_tick)? {
                        self.reach_goal(id)?;
                        if self.failure.is_some() {
                            break;
                        }
                    }
                }
                Err(SimError::NoRoute(_)) => {
                    if self.now - self.agents[id as usize].held_since < EVADE_AFTER || !self.evade(id, c)? {
                        self.table.hold(agent, c, self.now).map_err(|e| self.internal(e))?;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Move a long-held vehicle to a nearby free road cell so that whoever
    /// is waiting for its cell can get through. Returns whether it moved.
    fn evade(&mut self, id: u32, from: Cell) -> Result<bool, SimError> {
        let agent = VehicleId(id);
        let layout = self.layout;
        let mut seen: FxHashSet<Cell> = FxHashSet::default();
        let mut queue = std::collections::VecDeque::from([from]);
        seen.insert(from);
        let mut tried = 0;
        while let Some(c) = queue.pop_front() {
            if c != from && !layout.is_sink(c) && c != layout.entrance && self.table.hold_on(c).is_none() {
                if let Ok(path) = self.planner.plan(&self.table, agent, from, c, self.now) {
                    let goal_tick = path.arrival_tick();
                    self.install(id, path, goal_tick)?;
                    self.agents[id as usize].evading = true;
                    return Ok(true);
                }
                tried += 1;
                if tried == EVADE_CANDIDATES {
                    break;
                }
            }
            for n in layout.neighbors(c) {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::yard::{builtin_layout, parse_layout, YardSize};

    fn small(controller: Controller, demand: f64, seed: u64) -> SimConfig {
        SimConfig::new(Arc::new(builtin_layout(YardSize::Small)), controller, demand, seed)
    }

    #[test]
    fn zero_demand_completes_immediately() {
        for c in Controller::ALL {
            let out = run(&small(c, 0.0, 1)).unwrap();
            assert_eq!(out.status, RunStatus::Completed);
            assert_eq!((out.arrivals, out.exited_count), (0, 0));
            assert!(out.last_exit_time.is_none());
        }
    }

    #[test]
    fn arrivals_are_sorted_and_inside_the_window() {
        let mut rng = rng_stream(7, STREAM_ARRIVALS, 0);
        let a = sample_arrivals(60.0, 18000.0, &mut rng);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(a.iter().all(|&t| (0.0..18000.0).contains(&t)));
        assert!(sample_arrivals(0.0, 18000.0, &mut rng).is_empty());
    }

    #[test]
    fn degenerate_service_times() {
        let mut d = ServiceDistributions::default();
        d.cleaning.sd = 0.0;
        let mut rng = rng_stream(1, 2, 3);
        assert_eq!(sample_service_time(StationKind::Cleaning, &d, &mut rng), 1200.0);
        d.inspection = ServiceTime { mean: -300.0, sd: 0.0 };
        assert_eq!(sample_service_time(StationKind::Inspection, &d, &mut rng), 60.0);
        d.charging = ServiceTime { mean: 9000.0, sd: 0.0 };
        assert_eq!(sample_service_time(StationKind::Charging, &d, &mut rng), 7200.0);
    }

    #[test]
    fn degenerate_inspection_rates() {
        let mut rng = rng_stream(3, 4, 5);
        for _ in 0..1000 {
            assert_eq!(inspection_outcome(0.0, &mut rng), InspectionOutcome::Pass);
            assert_eq!(inspection_outcome(1.0, &mut rng), InspectionOutcome::Fail);
        }
    }

    #[test]
    fn tick_rounding() {
        let dt = 36.0 / 16.1;
        assert_eq!(seconds_to_ticks(0.0, dt), 0);
        assert_eq!(seconds_to_ticks(dt, dt), 1);
        assert_eq!(seconds_to_ticks(dt * 1.01, dt), 2);
        assert_eq!(seconds_to_ticks(1200.0, dt), 537);
    }

    #[test]
    fn config_validation() {
        let mut c = small(Controller::Isolated, 10.0, 1);
        assert!(c.validate().is_ok());
        c.window = 0.0;
        assert!(matches!(c.validate(), Err(ConfigError::NotPositive("window", _))));
        let mut c = small(Controller::Isolated, -1.0, 1);
        assert!(matches!(c.validate(), Err(ConfigError::Negative("demand", _))));
        c.demand = 1.0;
        c.service.loading.sd = -1.0;
        assert!(c.validate().is_err());
        let mut c = small(Controller::Isolated, 1.0, 1);
        c.inspection_fail_rate = 1.5;
        assert!(matches!(c.validate(), Err(ConfigError::FailRate(_))));
        let mut c = small(Controller::Isolated, 1.0, 1);
        c.preoccupied[StationKind::Parking.index()] = 31;
        assert!(matches!(c.validate(), Err(ConfigError::Preoccupied(StationKind::Parking))));
        let mut c = small(Controller::Isolated, 1.0, 1);
        c.arrival_times = Some(vec![5.0, 1.0]);
        assert!(matches!(c.validate(), Err(ConfigError::ArrivalTimes)));
    }

    #[test]
    fn expected_circuit_time_covers_service_means() {
        let layout = builtin_layout(YardSize::Small);
        let dt = 36.0 / 16.1;
        let e = expected_circuit_time(&layout, &ServiceDistributions::default(), dt);
        assert!(e > 110.0 * 60.0 && e < 110.0 * 60.0 + 200.0 * dt);
    }

    #[test]
    fn runs_are_deterministic_and_clean() {
        for c in Controller::ALL {
            let cfg = small(c, 40.0, 11);
            let a = run(&cfg).unwrap();
            let b = run(&cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.audit.is_clean(), "{c}: {:?}", a.audit);
            assert!(a.is_conserved());
        }
    }

    #[test]
    fn event_log_is_ndjson() {
        let out = run(&small(Controller::Orchestrated, 5.0, 3)).unwrap();
        let mut buf = Vec::new();
        write_event_log(&out.events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), out.events.len());
        for line in text.lines() {
            let e: Event = serde_json::from_str(line).unwrap();
            assert!(e.tick <= out.ticks);
        }
    }

    #[test]
    fn blocked_single_lane_scenario_fails_for_both() {
        let layout = parse_layout("CIWLP\nciwlp\nE...X\n").unwrap();
        for c in Controller::ALL {
            let mut cfg = SimConfig::new(Arc::new(layout.clone()), c, 0.0, 0);
            cfg.preoccupied = [1, 1, 1, 1, 1];
            cfg.arrival_times = Some(vec![0.0]);
            let out = run(&cfg).unwrap();
            assert_eq!(out.status, RunStatus::FacilityFailure, "{c}");
            assert_eq!(out.stranded, 1);
        }
    }
}
