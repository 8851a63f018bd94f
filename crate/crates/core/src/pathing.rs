//! Space-time A* over a shared reservation table.
//!
//! Time advances in ticks; one tick is the time needed to cross one cell.
//! A path occupies one `(cell, tick)` vertex per tick. A move `a -> b` that
//! arrives at tick `t` also reserves the edge `(a, b, t)` and its reverse so
//! no other vehicle can swap through it.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rustc_hash::{FxHashMap, FxHashSet};
use thiserror::Error;

use crate::vehicle::VehicleId;
use crate::yard::{Cell, DistanceField, YardLayout};

pub type Tick = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceTimePath {
    pub start_tick: Tick,
    /// Position at `start_tick + i`. Repeated cells are waits.
    pub steps: Vec<Cell>,
    /// Extra ticks the final cell stays reserved after arrival.
    pub dwell: u32,
}

impl SpaceTimePath {
    pub fn stationary(cell: Cell, start_tick: Tick) -> Self {
        SpaceTimePath { start_tick, steps: vec![cell], dwell: 0 }
    }

    /// Number of ticks from start to arrival.
    pub fn len(&self) -> u32 {
        self.steps.len() as u32 - 1
    }

    pub fn is_empty(&self) -> bool {
        self.steps.len() <= 1
    }

    pub fn arrival_tick(&self) -> Tick {
        self.start_tick + self.len()
    }

    pub fn start(&self) -> Cell {
        self.steps[0]
    }

    pub fn goal(&self) -> Cell {
        *self.steps.last().expect("paths have at least one step")
    }

    pub fn cell_at(&self, tick: Tick) -> Option<Cell> {
        tick.checked_sub(self.start_tick)
            .and_then(|i| self.steps.get(i as usize))
            .copied()
    }

    /// Every step traversable and consecutive steps equal or 4-adjacent.
    pub fn is_well_formed(&self, layout: &YardLayout) -> bool {
        !self.steps.is_empty()
            && self.steps.iter().all(|&c| layout.is_traversable(c))
            && self.steps.windows(2).all(|w| w[0] == w[1] || w[0].is_adjacent(w[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("no conflict-free path from {start} to {goal} within tick {bound}")]
    NoPath { start: Cell, goal: Cell, bound: Tick },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{cell} at tick {tick} already reserved by {owner}")]
pub struct Conflict {
    pub cell: Cell,
    pub tick: Tick,
    pub owner: VehicleId,
}

/// Space-time occupancy shared by every planned path in a run.
#[derive(Debug, Clone, Default)]
pub struct ReservationTable {
    vertex: FxHashMap<(u32, Tick), VehicleId>,
    edges: FxHashMap<(u32, u32, Tick), VehicleId>,
    /// Open-ended holds: the cell is taken from the given tick onward.
    holds: FxHashMap<u32, (VehicleId, Tick)>,
    horizon: Tick,
}

impl ReservationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn horizon(&self) -> Tick {
        self.horizon
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex.len()
    }

    /// Directed edge entries; each reserved move contributes two.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertex.is_empty() && self.edges.is_empty() && self.holds.is_empty()
    }

    pub fn vertex_owner(&self, cell: Cell, tick: Tick) -> Option<VehicleId> {
        let key = cell.key();
        if let Some(&owner) = self.vertex.get(&(key, tick)) {
            return Some(owner);
        }
        match self.holds.get(&key) {
            Some(&(owner, from)) if from <= tick => Some(owner),
            _ => None,
        }
    }

    pub fn edge_owner(&self, from: Cell, to: Cell, tick: Tick) -> Option<VehicleId> {
        self.edges.get(&(from.key(), to.key(), tick)).copied()
    }

    pub fn vertex_free_for(&self, agent: VehicleId, cell: Cell, tick: Tick) -> bool {
        self.vertex_owner(cell, tick).is_none_or(|o| o == agent)
    }

    pub fn edge_free_for(&self, agent: VehicleId, from: Cell, to: Cell, tick: Tick) -> bool {
        self.edge_owner(from, to, tick).is_none_or(|o| o == agent)
    }

    /// Reserve a single vertex (used for waits outside of planned paths).
    pub fn reserve_vertex(&mut self, agent: VehicleId, cell: Cell, tick: Tick) -> Result<(), Conflict> {
        match self.vertex_owner(cell, tick) {
            Some(owner) if owner != agent => Err(Conflict { cell, tick, owner }),
            _ => {
                self.vertex.insert((cell.key(), tick), agent);
                self.horizon = self.horizon.max(tick);
                Ok(())
            }
        }
    }

    pub fn release_vertex(&mut self, agent: VehicleId, cell: Cell, tick: Tick) {
        let key = (cell.key(), tick);
        if self.vertex.get(&key) == Some(&agent) {
            self.vertex.remove(&key);
        }
    }

    /// Vehicles (other than `agent`) whose reservations would collide with an
    /// open-ended hold of `cell` from `from`.
    pub fn hold_conflicts(&self, agent: VehicleId, cell: Cell, from: Tick) -> Vec<VehicleId> {
        let key = cell.key();
        let mut out: Vec<VehicleId> = self
            .vertex
            .iter()
            .filter(|(&(c, t), &o)| c == key && t >= from && o != agent)
            .map(|(_, &o)| o)
            .collect();
        if let Some(&(o, _)) = self.holds.get(&key) {
            if o != agent {
                out.push(o);
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Hold `cell` for `agent` from `from` onward. Fails if anyone else has a
    /// reservation there; resolve with [`ReservationTable::hold_conflicts`] first.
    pub fn hold(&mut self, agent: VehicleId, cell: Cell, from: Tick) -> Result<(), Conflict> {
        if let Some(&owner) = self.hold_conflicts(agent, cell, from).first() {
            return Err(Conflict { cell, tick: from, owner });
        }
        self.holds.insert(cell.key(), (agent, from));
        Ok(())
    }

    /// Open-ended hold on `cell`, if any: owner and first tick.
    pub fn hold_on(&self, cell: Cell) -> Option<(VehicleId, Tick)> {
        self.holds.get(&cell.key()).copied()
    }

    pub fn release_hold(&mut self, agent: VehicleId, cell: Cell) {
        if matches!(self.holds.get(&cell.key()), Some(&(o, _)) if o == agent) {
            self.holds.remove(&cell.key());
        }
    }

    /// Forget everything strictly before `tick`.
    pub fn prune_before(&mut self, tick: Tick) {
        self.vertex.retain(|&(_, t), _| t >= tick);
        self.edges.retain(|&(_, _, t), _| t >= tick);
    }

    fn first_conflict(&self, agent: VehicleId, path: &SpaceTimePath) -> Option<Conflict> {
        for (i, &cell) in path.steps.iter().enumerate() {
            let tick = path.start_tick + i as Tick;
            if let Some(owner) = self.vertex_owner(cell, tick).filter(|&o| o != agent) {
                return Some(Conflict { cell, tick, owner });
            }
            if i > 0 {
                let prev = path.steps[i - 1];
                if prev != cell {
                    if let Some(owner) = self.edge_owner(prev, cell, tick).filter(|&o| o != agent) {
                        return Some(Conflict { cell, tick, owner });
                    }
                }
            }
        }
        let end = path.goal();
        for d in 1..=path.dwell {
            let tick = path.arrival_tick() + d;
            if let Some(owner) = self.vertex_owner(end, tick).filter(|&o| o != agent) {
                return Some(Conflict { cell: end, tick, owner });
            }
        }
        None
    }
}

/// Add every vertex, move (both directions) and dwell reservation of `path`.
/// Nothing is written when any of them is already taken by another vehicle.
pub fn commit_path(
    table: &mut ReservationTable,
    agent: VehicleId,
    path: &SpaceTimePath,
) -> Result<(), Conflict> {
    if let Some(c) = table.first_conflict(agent, path) {
        return Err(c);
    }
    for (i, &cell) in path.steps.iter().enumerate() {
        let tick = path.start_tick + i as Tick;
        table.vertex.insert((cell.key(), tick), agent);
        if i > 0 {
            let prev = path.steps[i - 1];
            if prev != cell {
                table.edges.insert((prev.key(), cell.key(), tick), agent);
                table.edges.insert((cell.key(), prev.key(), tick), agent);
            }
        }
    }
    let end = path.goal();
    for d in 1..=path.dwell {
        table.vertex.insert((end.key(), path.arrival_tick() + d), agent);
    }
    table.horizon = table.horizon.max(path.arrival_tick() + path.dwell);
    Ok(())
}

/// Drop the reservations of `path` at ticks `>= from_tick`.
pub fn release_future(table: &mut ReservationTable, agent: VehicleId, path: &SpaceTimePath, from_tick: Tick) {
    for (i, &cell) in path.steps.iter().enumerate() {
        let tick = path.start_tick + i as Tick;
        if tick < from_tick {
            continue;
        }
        table.release_vertex(agent, cell, tick);
        if i > 0 {
            let prev = path.steps[i - 1];
            if prev != cell {
                for key in [(prev.key(), cell.key(), tick), (cell.key(), prev.key(), tick)] {
                    if table.edges.get(&key) == Some(&agent) {
                        table.edges.remove(&key);
                    }
                }
            }
        }
    }
    let end = path.goal();
    for d in 1..=path.dwell {
        let tick = path.arrival_tick() + d;
        if tick >= from_tick {
            table.release_vertex(agent, end, tick);
        }
    }
}

/// Reusable space-time A* search state for one layout.
pub struct PathPlanner<'a> {
    layout: &'a YardLayout,
    dwell_margin: u32,
    adjacency: Vec<Vec<u32>>,
    heuristics: FxHashMap<Cell, DistanceField>,
    open: BinaryHeap<Reverse<(u32, u32, Tick, u32)>>,
    parent: FxHashMap<(u32, Tick), u32>,
    closed: FxHashSet<(u32, Tick)>,
    expansions: u64,
}

impl<'a> PathPlanner<'a> {
    pub fn new(layout: &'a YardLayout, dwell_margin: u32) -> Self {
        let adjacency = (0..layout.cell_count())
            .map(|i| {
                let cell = layout.cell_at(i);
                if layout.is_traversable(cell) {
                    layout.neighbors(cell).map(|n| layout.index(n) as u32).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        PathPlanner {
            layout,
            dwell_margin,
            adjacency,
            heuristics: FxHashMap::default(),
            open: BinaryHeap::new(),
            parent: FxHashMap::default(),
            closed: FxHashSet::default(),
            expansions: 0,
        }
    }

    pub fn layout(&self) -> &'a YardLayout {
        self.layout
    }

    /// Total states expanded by this planner so far.
    pub fn expansions(&self) -> u64 {
        self.expansions
    }

    /// Dwell reserved at the end of a path to `goal`: none at gates and the exit.
    pub fn dwell_for(&self, goal: Cell) -> u32 {
        if self.layout.is_sink(goal) {
            0
        } else {
            self.dwell_margin
        }
    }

    /// Last tick the search may reach for a request starting at `start_tick`.
    pub fn search_bound(&self, table: &ReservationTable, start_tick: Tick) -> Tick {
        table.horizon().max(start_tick) + 4 * (self.layout.width + self.layout.height) as Tick
    }

    /// Earliest-arrival conflict-free path from `start` at `start_tick` to `goal`.
    ///
    /// The start vertex itself is assumed to belong to `agent`; every later
    /// vertex and move must be free of other vehicles' reservations.
    pub fn plan(
        &mut self,
        table: &ReservationTable,
        agent: VehicleId,
        start: Cell,
        goal: Cell,
        start_tick: Tick,
    ) -> Result<SpaceTimePath, PathError> {
        let layout = self.layout;
        let dwell = self.dwell_for(goal);
        let bound = self.search_bound(table, start_tick);
        let no_path = PathError::NoPath { start, goal, bound };
        if !layout.is_traversable(start) || !layout.is_traversable(goal) {
            return Err(no_path);
        }
        let h = self
            .heuristics
            .entry(goal)
            .or_insert_with(|| DistanceField::from_source(layout, goal));
        let start_idx = layout.index(start) as u32;
        let goal_idx = layout.index(goal) as u32;
        let h0 = h.raw(start_idx as usize);
        if h0 == DistanceField::UNREACHABLE {
            return Err(no_path);
        }
        // Someone parked on the goal for good before we could possibly get there.
        if let Some((owner, from)) = table.hold_on(goal) {
            if owner != agent && from <= start_tick + h0.max(1) {
                return Err(no_path);
            }
        }

        let dwell_free = |t: Tick| (1..=dwell).all(|d| table.vertex_free_for(agent, goal, t + d));
        if start == goal && dwell_free(start_tick) {
            return Ok(SpaceTimePath { start_tick, steps: vec![start], dwell });
        }

        self.open.clear();
        self.parent.clear();
        self.closed.clear();
        self.open.push(Reverse((h0, h0, start_tick, start_idx)));

        while let Some(Reverse((_, _, tick, idx))) = self.open.pop() {
            if !self.closed.insert((idx, tick)) {
                continue;
            }
            self.expansions += 1;
            if idx == goal_idx && tick > start_tick {
                let mut steps = Vec::with_capacity((tick - start_tick + 1) as usize);
                let (mut i, mut t) = (idx, tick);
                steps.push(layout.cell_at(i as usize));
                while t > start_tick {
                    i = self.parent[&(i, t)];
                    t -= 1;
                    steps.push(layout.cell_at(i as usize));
                }
                steps.reverse();
                return Ok(SpaceTimePath { start_tick, steps, dwell });
            }
            if tick >= bound {
                continue;
            }
            let next = tick + 1;
            let here = layout.cell_at(idx as usize);
            let adj = &self.adjacency[idx as usize];
            for n in std::iter::once(idx).chain(adj.iter().copied()) {
                let hn = h.raw(n as usize);
                if hn == DistanceField::UNREACHABLE || self.closed.contains(&(n, next)) {
                    continue;
                }
                let cell = layout.cell_at(n as usize);
                if !table.vertex_free_for(agent, cell, next) {
                    continue;
                }
                if n != idx && !table.edge_free_for(agent, here, cell, next) {
                    continue;
                }
                if n == goal_idx && !dwell_free(next) {
                    continue;
                }
                if let std::collections::hash_map::Entry::Vacant(e) = self.parent.entry((n, next)) {
                    e.insert(idx);
                    let g = next - start_tick;
                    self.open.push(Reverse((g + hn, hn, next, n)));
                }
            }
        }
        Err(no_path)
    }
}

/// One-off planning call; builds a fresh planner with a one-tick dwell margin.
pub fn plan_path(
    layout: &YardLayout,
    table: &ReservationTable,
    agent: VehicleId,
    start: Cell,
    goal: Cell,
    start_tick: Tick,
) -> Result<SpaceTimePath, PathError> {
    PathPlanner::new(layout, 1).plan(table, agent, start, goal, start_tick)
}
