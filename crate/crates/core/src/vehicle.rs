//! Vehicle identity, circuit progress and prerequisite rules.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::pathing::SpaceTimePath;
use crate::yard::{Cell, StationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Small set of station kinds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct StationSet(u8);

impl StationSet {
    pub const EMPTY: StationSet = StationSet(0);

    pub fn circuit() -> Self {
        StationKind::CIRCUIT.into_iter().collect()
    }

    pub fn contains(self, kind: StationKind) -> bool {
        self.0 & (1 << kind.index()) != 0
    }

    pub fn insert(&mut self, kind: StationKind) -> bool {
        let had = self.contains(kind);
        self.0 |= 1 << kind.index();
        !had
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_superset(self, other: StationSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn difference(self, other: StationSet) -> StationSet {
        StationSet(self.0 & !other.0)
    }

    /// Members in kind order.
    pub fn iter(self) -> impl Iterator<Item = StationKind> {
        StationKind::ALL.into_iter().filter(move |&k| self.contains(k))
    }
}

impl FromIterator<StationKind> for StationSet {
    fn from_iter<T: IntoIterator<Item = StationKind>>(iter: T) -> Self {
        let mut s = StationSet::EMPTY;
        for k in iter {
            s.insert(k);
        }
        s
    }
}

/// Stations that must be finished before `kind` may start.
pub fn prerequisites(kind: StationKind) -> StationSet {
    match kind {
        StationKind::Loading => [StationKind::Charging, StationKind::Inspection, StationKind::Cleaning]
            .into_iter()
            .collect(),
        _ => StationSet::EMPTY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleStatus {
    Moving,
    Serving,
    Parked,
    Stranded,
    Exited,
    ImpoundedInParking,
}

impl VehicleStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            VehicleStatus::Stranded | VehicleStatus::Exited | VehicleStatus::ImpoundedInParking
        )
    }
}

/// Where the vehicle physically is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    /// Arrived but still waiting outside the entrance.
    Queued,
    OnGrid(Cell),
    /// Inside a station (serving, parked, or waiting at the gate to leave).
    InStation(StationKind),
    Departed,
}

/// What the controller wants the vehicle to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Station(StationKind),
    Exit,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Station(k) => write!(f, "{k}"),
            Target::Exit => f.write_str("exit"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: VehicleId,
    /// Seconds since simulation start.
    pub entry_time: f64,
    pub position: Position,
    /// Seconds of charging needed to reach 100 %; zero once charging is done.
    pub remaining_charge_time: f64,
    pub completed: StationSet,
    pub trust_score: f64,
    pub assignment: Option<Target>,
    pub planned_path: Option<SpaceTimePath>,
    pub status: VehicleStatus,
}

impl Vehicle {
    pub fn new(id: VehicleId, entry_time: f64, remaining_charge_time: f64, trust_score: f64) -> Self {
        Vehicle {
            id,
            entry_time,
            position: Position::Queued,
            remaining_charge_time,
            completed: StationSet::EMPTY,
            trust_score,
            assignment: None,
            planned_path: None,
            status: VehicleStatus::Moving,
        }
    }

    /// Circuit stations not yet done, in kind order.
    pub fn remaining_stations(&self) -> StationSet {
        StationSet::circuit().difference(self.completed)
    }

    pub fn circuit_complete(&self) -> bool {
        self.remaining_stations().is_empty()
    }

    pub fn prerequisites_met(&self, kind: StationKind) -> bool {
        self.completed.is_superset(prerequisites(kind))
    }

    /// Record a finished service. Returns false if `kind` was already done.
    pub fn complete(&mut self, kind: StationKind) -> bool {
        debug_assert!(kind.is_circuit());
        debug_assert!(self.prerequisites_met(kind));
        if kind == StationKind::Charging {
            self.remaining_charge_time = 0.0;
        }
        self.completed.insert(kind)
    }

    pub fn is_parked(&self) -> bool {
        self.status == VehicleStatus::Parked
    }
}
