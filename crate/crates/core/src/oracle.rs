//! Brute-force reference implementations for small instances.
//!
//! Nothing here shares code with the production assignment or search paths:
//! distances come from a local BFS, scores are re-evaluated from the raw
//! formula, and paths are found by layer-by-layer space-time BFS.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::assignment::{replan, StationLoads, Trigger, WorldView};
use crate::pathing::{PathPlanner, ReservationTable, Tick};
use crate::scoring::ScoreWeights;
use crate::vehicle::{Position, StationSet, Target, Vehicle, VehicleId, VehicleStatus};
use crate::yard::{parse_layout, Cell, DistanceTable, LayoutError, StationKind, YardLayout};

fn bfs_distance(layout: &YardLayout, from: Cell, to: Cell) -> u32 {
    let mut seen: HashMap<Cell, u32> = HashMap::new();
    let mut queue = VecDeque::from([from]);
    seen.insert(from, 0);
    while let Some(c) = queue.pop_front() {
        let d = seen[&c];
        if c == to {
            return d;
        }
        for (dr, dc) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
            let (r, col) = (c.row as i32 + dr, c.col as i32 + dc);
            if r < 0 || col < 0 {
                continue;
            }
            let n = Cell::new(r as u16, col as u16);
            if layout.is_traversable(n) && !seen.contains_key(&n) {
                seen.insert(n, d + 1);
                queue.push_back(n);
            }
        }
    }
    u32::MAX
}

fn origin_of(layout: &YardLayout, v: &Vehicle) -> Cell {
    match v.position {
        Position::OnGrid(c) => c,
        Position::InStation(k) => layout.stations[k.index()].gate,
        _ => layout.entrance,
    }
}

fn needed(v: &Vehicle) -> Vec<StationKind> {
    let all = [StationKind::Charging, StationKind::Inspection, StationKind::Cleaning, StationKind::Loading];
    all.into_iter().filter(|k| !v.completed.contains(*k)).collect()
}

fn prereqs_ok(v: &Vehicle, k: StationKind) -> bool {
    k != StationKind::Loading
        || [StationKind::Charging, StationKind::Inspection, StationKind::Cleaning]
            .iter()
            .all(|p| v.completed.contains(*p))
}

/// Steps 1–4 evaluated literally with `free[k]` berths still open.
fn literal_steps(layout: &YardLayout, free: &[i64; 5], v: &Vehicle) -> Option<Target> {
    let open = |k: StationKind| free[k as usize] > 0;
    // step 1
    if let Some(Target::Station(prev)) = v.assignment {
        if prev != StationKind::Parking && needed(v).contains(&prev) && prereqs_ok(v, prev) && open(prev) {
            return Some(Target::Station(prev));
        }
    }
    // step 2
    let eligible: Vec<StationKind> = needed(v).into_iter().filter(|&k| prereqs_ok(v, k) && open(k)).collect();
    // step 3
    let origin = origin_of(layout, v);
    let mut best: Option<(u32, usize, StationKind)> = None;
    for k in eligible {
        let d = bfs_distance(layout, origin, layout.stations[k.index()].gate);
        let key = (d, k as usize, k);
        if best.is_none_or(|b| (key.0, key.1) < (b.0, b.1)) {
            best = Some(key);
        }
    }
    if let Some((_, _, k)) = best {
        return Some(Target::Station(k));
    }
    // step 4
    let already_parked = v.status == VehicleStatus::Parked && v.position == Position::InStation(StationKind::Parking);
    if already_parked || open(StationKind::Parking) {
        return Some(Target::Station(StationKind::Parking));
    }
    None
}

fn free_counts(loads: &StationLoads) -> [i64; 5] {
    let mut free = [0i64; 5];
    for (k, l) in loads.iter() {
        free[k as usize] = l.berths as i64 - l.occupied as i64 - l.permanent_holds as i64 - l.inbound as i64;
    }
    free
}

/// Reference for a single `assign_one` call. `None` means impossible.
pub fn brute_force_assign_one(layout: &YardLayout, loads: &StationLoads, v: &Vehicle) -> Option<Target> {
    literal_steps(layout, &free_counts(loads), v)
}

/// Reference for a full replanning pass. `None` when some vehicle is stranded.
pub fn brute_force_replan(
    layout: &YardLayout,
    loads: &StationLoads,
    vehicles: &[Vehicle],
    clock: f64,
    expected_circuit_time: f64,
    weights: &ScoreWeights,
) -> Option<Vec<(VehicleId, Target)>> {
    let active: Vec<&Vehicle> = vehicles
        .iter()
        .filter(|v| matches!(v.status, VehicleStatus::Moving | VehicleStatus::Parked) && v.position != Position::Departed)
        .collect();

    let mut free = free_counts(loads);
    // Give back the reservations the candidates were holding before this pass.
    for v in &active {
        if let Some(Target::Station(k)) = v.assignment {
            if v.position != Position::InStation(k) {
                free[k as usize] += 1;
            }
        }
    }

    let score = |v: &Vehicle| {
        let hours = v.remaining_charge_time / 3600.0;
        let b = if hours < 1.0 / 60.0 { 60.0 } else { 1.0 / hours };
        let c = v.completed.len() as f64;
        let t = (clock - v.entry_time - expected_circuit_time).max(0.0);
        weights.charge * b + weights.circuit * c + weights.lateness * t + weights.trust * v.trust_score
    };
    let mut order = active.clone();
    order.sort_by(|a, b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap()
            .then(a.entry_time.partial_cmp(&b.entry_time).unwrap())
            .then(a.id.cmp(&b.id))
    });

    let mut out = Vec::new();
    for v in order {
        let target = if needed(v).is_empty() { Target::Exit } else { literal_steps(layout, &free, v)? };
        if let Target::Station(k) = target {
            if v.position != Position::InStation(k) {
                free[k as usize] -= 1;
            }
        }
        out.push((v.id, target));
    }
    Some(out)
}

/// Earliest arrival tick by exhaustive BFS over the space-time graph.
/// `dwell` ticks after arrival must also be free at the goal.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_arrival(
    layout: &YardLayout,
    table: &ReservationTable,
    agent: VehicleId,
    start: Cell,
    goal: Cell,
    start_tick: Tick,
    dwell: u32,
    bound: Tick,
) -> Option<Tick> {
    if !layout.is_traversable(start) || !layout.is_traversable(goal) {
        return None;
    }
    let free_v = |c: Cell, t: Tick| table.vertex_owner(c, t).is_none_or(|o| o == agent);
    let free_e = |a: Cell, b: Cell, t: Tick| table.edge_owner(a, b, t).is_none_or(|o| o == agent);
    let dwell_ok = |t: Tick| (1..=dwell).all(|d| free_v(goal, t + d));
    if start == goal && dwell_ok(start_tick) {
        return Some(start_tick);
    }
    let mut layer: BTreeSet<Cell> = BTreeSet::from([start]);
    let mut t = start_tick;
    while t < bound && !layer.is_empty() {
        let mut next = BTreeSet::new();
        for &c in &layer {
            let mut moves = vec![c];
            for (dr, dc) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                let (r, col) = (c.row as i32 + dr, c.col as i32 + dc);
                if r >= 0 && col >= 0 {
                    moves.push(Cell::new(r as u16, col as u16));
                }
            }
            for n in moves {
                if !layout.is_traversable(n) || !free_v(n, t + 1) {
                    continue;
                }
                if n != c && !free_e(c, n, t + 1) {
                    continue;
                }
                next.insert(n);
            }
        }
        t += 1;
        if next.contains(&goal) && dwell_ok(t) {
            return Some(t);
        }
        next.remove(&goal);
        layer = next;
    }
    None
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub layout: String,
    pub assignment: Option<AssignmentCase>,
    pub pathing: Option<PathingCase>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentCase {
    #[serde(default)]
    pub clock: f64,
    #[serde(default = "default_expected")]
    pub expected_circuit_time: f64,
    #[serde(default)]
    pub occupied: HashMap<StationKind, u32>,
    #[serde(default)]
    pub vehicles: Vec<VehicleCase>,
}

fn default_expected() -> f64 {
    7200.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleCase {
    pub id: u32,
    #[serde(default)]
    pub entry_time: f64,
    #[serde(default = "default_charge")]
    pub remaining_charge_min: f64,
    #[serde(default)]
    pub trust: f64,
    #[serde(default)]
    pub completed: Vec<StationKind>,
    pub previous: Option<StationKind>,
    /// `"queued"`, `"parked"`, or `[row, col]`.
    pub position: PositionCase,
}

fn default_charge() -> f64 {
    60.0
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum PositionCase {
    Named(String),
    Cell([u16; 2]),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathingCase {
    pub start: [u16; 2],
    pub goal: [u16; 2],
    #[serde(default)]
    pub start_tick: Tick,
    /// `[row, col, tick]` vertices owned by another vehicle.
    #[serde(default)]
    pub reserved: Vec<[u32; 3]>,
}

type Assignments = Vec<(VehicleId, Target)>;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// (implementation, oracle); `None` inside means a stranded vehicle.
    pub assignment: Option<(Option<Assignments>, Option<Assignments>)>,
    pub pathing: Option<(Option<Tick>, Option<Tick>)>,
}

impl OracleReport {
    pub fn all_match(&self) -> bool {
        self.assignment.as_ref().is_none_or(|(a, b)| a == b) && self.pathing.as_ref().is_none_or(|(a, b)| a == b)
    }
}

fn fmt_assign(a: &Option<Vec<(VehicleId, Target)>>) -> String {
    match a {
        None => "assignment impossible".into(),
        Some(v) => v.iter().map(|(id, t)| format!("{id}->{t}")).collect::<Vec<_>>().join(" "),
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((got, want)) = &self.assignment {
            let verdict = if got == want { "match" } else { "MISMATCH" };
            writeln!(f, "assignment: {verdict}")?;
            writeln!(f, "  replan : {}", fmt_assign(got))?;
            writeln!(f, "  oracle : {}", fmt_assign(want))?;
        }
        if let Some((got, want)) = &self.pathing {
            let verdict = if got == want { "match" } else { "MISMATCH" };
            let show = |t: &Option<Tick>| t.map_or("no path".to_string(), |t| format!("arrives at tick {t}"));
            writeln!(f, "pathing: {verdict}")?;
            writeln!(f, "  space-time A* : {}", show(got))?;
            writeln!(f, "  space-time BFS: {}", show(want))?;
        }
        Ok(())
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    Ok(toml::from_str(text)?)
}

/// Run the implementation and the brute-force reference side by side.
pub fn run_scenario(scenario: &Scenario) -> Result<OracleReport, ScenarioError> {
    let layout = parse_layout(&scenario.layout)?;
    let cell = |[r, c]: [u16; 2]| -> Result<Cell, ScenarioError> {
        let cell = Cell::new(r, c);
        if layout.is_traversable(cell) {
            Ok(cell)
        } else {
            Err(ScenarioError::Invalid(format!("{cell} is not a traversable cell")))
        }
    };

    let assignment = match &scenario.assignment {
        None => None,
        Some(case) => {
            let mut loads = StationLoads::from_layout(&layout);
            for (&k, &n) in &case.occupied {
                loads.get_mut(k).occupied = n;
            }
            let mut vehicles = Vec::new();
            for vc in &case.vehicles {
                let mut v = Vehicle::new(VehicleId(vc.id), vc.entry_time, vc.remaining_charge_min * 60.0, vc.trust);
                v.completed = vc.completed.iter().copied().collect::<StationSet>();
                if v.completed.contains(StationKind::Charging) {
                    v.remaining_charge_time = 0.0;
                }
                v.assignment = vc.previous.map(Target::Station);
                v.position = match &vc.position {
                    PositionCase::Named(s) if s == "queued" => Position::Queued,
                    PositionCase::Named(s) if s == "parked" => {
                        v.status = VehicleStatus::Parked;
                        v.assignment = Some(Target::Station(StationKind::Parking));
                        loads.get_mut(StationKind::Parking).occupied += 1;
                        Position::InStation(StationKind::Parking)
                    }
                    PositionCase::Named(s) => return Err(ScenarioError::Invalid(format!("unknown position `{s}`"))),
                    PositionCase::Cell(rc) => Position::OnGrid(cell(*rc)?),
                };
                if let Some(Target::Station(k)) = v.assignment {
                    if v.position != Position::InStation(k) {
                        loads.get_mut(k).inbound += 1;
                    }
                }
                vehicles.push(v);
            }
            for (k, l) in loads.iter() {
                if l.used() > l.berths {
                    return Err(ScenarioError::Invalid(format!("{k} is over capacity")));
                }
            }
            let distances = DistanceTable::new(&layout);
            let weights = ScoreWeights::default();
            let oracle = brute_force_replan(&layout, &loads, &vehicles, case.clock, case.expected_circuit_time, &weights);
            let mut world = WorldView {
                layout: &layout,
                distances: &distances,
                loads,
                clock: case.clock,
                expected_circuit_time: case.expected_circuit_time,
                weights,
            };
            let got = replan(Trigger::CapacityReleased(StationKind::Parking), &mut world, &vehicles)
                .ok()
                .map(|o| o.assignments);
            Some((got, oracle))
        }
    };

    let pathing = match &scenario.pathing {
        None => None,
        Some(case) => {
            let start = cell(case.start)?;
            let goal = cell(case.goal)?;
            let mut table = ReservationTable::new();
            let other = VehicleId(u32::MAX);
            for &[r, c, t] in &case.reserved {
                table
                    .reserve_vertex(other, Cell::new(r as u16, c as u16), t)
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            }
            let agent = VehicleId(0);
            let mut planner = PathPlanner::new(&layout, 1);
            let got = planner.plan(&table, agent, start, goal, case.start_tick).ok().map(|p| p.arrival_tick());
            let bound = planner.search_bound(&table, case.start_tick);
            let dwell = planner.dwell_for(goal);
            let want = brute_force_arrival(&layout, &table, agent, start, goal, case.start_tick, dwell, bound);
            Some((got, want))
        }
    };

    Ok(OracleReport { assignment, pathing })
}
