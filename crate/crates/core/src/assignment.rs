//! Orchestrated station assignment.
//!
//! On every replanning trigger all vehicles that are not being served are
//! ranked by priority score and, from the top down, given a target:
//!
//! 1. keep the previous station if it still has capacity;
//! 2. otherwise collect the remaining stations whose prerequisites are met
//!    and that have capacity;
//! 3. pick the one whose gate is closest (ties in kind order);
//! 4. otherwise park.
//!
//! A vehicle with its circuit done is sent to the exit. Capacity counts
//! vehicles inside a station, permanent holds and inbound assignments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{rank_vehicles, PriorityScore, ScoreWeights};
use crate::vehicle::{Position, Target, Vehicle, VehicleId, VehicleStatus};
use crate::yard::{Cell, DistanceTable, StationKind, YardLayout};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationLoad {
    pub berths: u32,
    pub occupied: u32,
    pub permanent_holds: u32,
    pub inbound: u32,
}

impl StationLoad {
    pub fn used(&self) -> u32 {
        self.occupied + self.permanent_holds + self.inbound
    }

    pub fn free(&self) -> u32 {
        self.berths.saturating_sub(self.used())
    }

    pub fn has_capacity(&self) -> bool {
        self.free() > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BookkeepingError {
    #[error("{kind}: released an inbound reservation that was not held")]
    InboundUnderflow { kind: StationKind },
    #[error("{kind}: released a berth that was not occupied")]
    OccupiedUnderflow { kind: StationKind },
    #[error("{kind}: capacity exceeded")]
    Overflow { kind: StationKind },
}

/// Live occupancy of all five stations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StationLoads([StationLoad; 5]);

impl StationLoads {
    pub fn from_layout(layout: &YardLayout) -> Self {
        let mut loads = StationLoads::default();
        for kind in StationKind::ALL {
            loads.0[kind.index()].berths = layout.capacity(kind);
        }
        loads
    }

    pub fn get(&self, kind: StationKind) -> &StationLoad {
        &self.0[kind.index()]
    }

    pub fn get_mut(&mut self, kind: StationKind) -> &mut StationLoad {
        &mut self.0[kind.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (StationKind, &StationLoad)> {
        StationKind::ALL.into_iter().zip(self.0.iter())
    }

    fn check(&self, kind: StationKind) -> Result<(), BookkeepingError> {
        let l = self.get(kind);
        if l.used() > l.berths {
            Err(BookkeepingError::Overflow { kind })
        } else {
            Ok(())
        }
    }

    pub fn reserve_inbound(&mut self, kind: StationKind) -> Result<(), BookkeepingError> {
        self.get_mut(kind).inbound += 1;
        self.check(kind)
    }

    pub fn cancel_inbound(&mut self, kind: StationKind) -> Result<(), BookkeepingError> {
        let l = self.get_mut(kind);
        l.inbound = l.inbound.checked_sub(1).ok_or(BookkeepingError::InboundUnderflow { kind })?;
        Ok(())
    }

    /// An inbound vehicle passes the gate: inbound −1, occupied +1.
    pub fn enter_from_inbound(&mut self, kind: StationKind) -> Result<(), BookkeepingError> {
        self.cancel_inbound(kind)?;
        self.get_mut(kind).occupied += 1;
        self.check(kind)
    }

    /// A vehicle without a reservation takes a berth (isolated controller).
    pub fn enter_direct(&mut self, kind: StationKind) -> Result<(), BookkeepingError> {
        self.get_mut(kind).occupied += 1;
        self.check(kind)
    }

    pub fn leave(&mut self, kind: StationKind) -> Result<(), BookkeepingError> {
        let l = self.get_mut(kind);
        l.occupied = l.occupied.checked_sub(1).ok_or(BookkeepingError::OccupiedUnderflow { kind })?;
        Ok(())
    }

    /// Move an inbound reservation from one station to another.
    pub fn reroute(&mut self, from: StationKind, to: StationKind) -> Result<(), BookkeepingError> {
        self.cancel_inbound(from)?;
        self.reserve_inbound(to)
    }

    pub fn add_permanent_hold(&mut self, kind: StationKind) -> Result<(), BookkeepingError> {
        self.get_mut(kind).permanent_holds += 1;
        self.check(kind)
    }

    pub fn total_used(&self) -> u32 {
        self.0.iter().map(|l| l.occupied + l.permanent_holds).sum()
    }

    pub fn total_berths(&self) -> u32 {
        self.0.iter().map(|l| l.berths).sum()
    }
}

/// Snapshot of the yard as seen by the orchestrated controller.
#[derive(Debug, Clone)]
pub struct WorldView<'a> {
    pub layout: &'a YardLayout,
    pub distances: &'a DistanceTable,
    pub loads: StationLoads,
    /// Seconds since simulation start.
    pub clock: f64,
    pub expected_circuit_time: f64,
    pub weights: ScoreWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    NewVehicleEntered(VehicleId),
    StationCompleted(VehicleId, StationKind),
    /// A berth came free outside of a service completion (impound resolved).
    CapacityReleased(StationKind),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssignError {
    #[error("{0}: every needed station and the parking lot are at capacity")]
    AssignmentImpossible(VehicleId),
    #[error("trigger names unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error(transparent)]
    Bookkeeping(#[from] BookkeepingError),
}

/// Cell the vehicle measures distances from.
pub fn reference_cell(v: &Vehicle, layout: &YardLayout) -> Cell {
    match v.position {
        Position::OnGrid(c) => c,
        Position::InStation(k) => layout.gate(k),
        Position::Queued | Position::Departed => layout.entrance,
    }
}

/// Whether `v` currently holds an inbound reservation at `kind`.
pub fn holds_inbound(v: &Vehicle, kind: StationKind) -> bool {
    v.assignment == Some(Target::Station(kind)) && v.position != Position::InStation(kind)
}

/// Steps 1–4 for one vehicle against the current loads.
pub fn assign_one(v: &Vehicle, world: &WorldView<'_>) -> Result<Target, AssignError> {
    let remaining = v.remaining_stations();
    let usable = |k: StationKind| remaining.contains(k) && v.prerequisites_met(k) && world.loads.get(k).has_capacity();

    if let Some(Target::Station(k)) = v.assignment {
        if k.is_circuit() && usable(k) {
            return Ok(Target::Station(k));
        }
    }

    let origin = world.layout.index(reference_cell(v, world.layout));
    let nearest = remaining
        .iter()
        .filter(|&k| usable(k))
        .min_by_key(|&k| (world.distances.to_gate(k).raw(origin), k.index()));
    if let Some(k) = nearest {
        return Ok(Target::Station(k));
    }

    if v.position == Position::InStation(StationKind::Parking) && v.status == VehicleStatus::Parked {
        return Ok(Target::Station(StationKind::Parking));
    }
    if world.loads.get(StationKind::Parking).has_capacity() {
        return Ok(Target::Station(StationKind::Parking));
    }
    Err(AssignError::AssignmentImpossible(v.id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplanOutcome {
    /// Candidates in processing order.
    pub ranking: Vec<PriorityScore>,
    /// New target per candidate, in the same order.
    pub assignments: Vec<(VehicleId, Target)>,
}

pub fn is_candidate(v: &Vehicle) -> bool {
    matches!(v.status, VehicleStatus::Moving | VehicleStatus::Parked) && v.position != Position::Departed
}

/// Re-assign every vehicle that is not being served, highest priority first.
///
/// `world.loads` is updated with the new inbound reservations. `vehicles` is
/// not modified; the caller applies the returned targets.
pub fn replan(trigger: Trigger, world: &mut WorldView<'_>, vehicles: &[Vehicle]) -> Result<ReplanOutcome, AssignError> {
    let trigger_vehicle = match trigger {
        Trigger::NewVehicleEntered(id) | Trigger::StationCompleted(id, _) => Some(id),
        Trigger::CapacityReleased(_) => None,
    };
    if let Some(id) = trigger_vehicle {
        if !vehicles.iter().any(|v| v.id == id) {
            return Err(AssignError::UnknownVehicle(id));
        }
    }

    let candidates: Vec<&Vehicle> = vehicles.iter().filter(|v| is_candidate(v)).collect();
    for v in &candidates {
        if let Some(Target::Station(k)) = v.assignment {
            if holds_inbound(v, k) {
                world.loads.cancel_inbound(k)?;
            }
        }
    }

    let ranking = rank_vehicles(candidates.iter().copied(), world.clock, world.expected_circuit_time, &world.weights);
    let mut assignments = Vec::with_capacity(ranking.len());
    for score in &ranking {
        let v = candidates
            .iter()
            .find(|v| v.id == score.id)
            .expect("ranked vehicles come from the candidate list");
        let target = if v.circuit_complete() { Target::Exit } else { assign_one(v, world)? };
        if let Target::Station(k) = target {
            if v.position != Position::InStation(k) {
                world.loads.reserve_inbound(k)?;
            }
        }
        assignments.push((v.id, target));
    }
    Ok(ReplanOutcome { ranking, assignments })
}
