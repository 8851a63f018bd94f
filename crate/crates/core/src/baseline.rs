//! Isolated static-rules controller.
//!
//! Vehicles drive a fixed loop Charging → Inspection → Cleaning → Loading →
//! Parking and only learn whether a station has room once they reach its gate.

use serde::{Deserialize, Serialize};

use crate::assignment::StationLoad;
use crate::vehicle::{StationSet, Vehicle};
use crate::yard::{grid_distance, Cell, StationKind, YardLayout};

pub const LOOP_ORDER: [StationKind; 5] = [
    StationKind::Charging,
    StationKind::Inspection,
    StationKind::Cleaning,
    StationKind::Loading,
    StationKind::Parking,
];

/// Where a vehicle currently sits on the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopPosition {
    Entrance,
    At(StationKind),
}

/// Fixed loop with the static shortest path length of every leg.
#[derive(Debug, Clone)]
pub struct LoopRoute {
    pub order: [StationKind; 5],
    /// `legs[i]` is the distance in cells from the gate of `order[i]` to the
    /// gate of `order[(i + 1) % 5]`.
    pub legs: [u32; 5],
    pub from_entrance: u32,
}

impl LoopRoute {
    pub fn new(layout: &YardLayout) -> Self {
        let d = |a: Cell, b: Cell| grid_distance(layout, a, b).expect("validated layouts are connected");
        let mut legs = [0; 5];
        for (i, leg) in legs.iter_mut().enumerate() {
            *leg = d(layout.gate(LOOP_ORDER[i]), layout.gate(LOOP_ORDER[(i + 1) % 5]));
        }
        LoopRoute { order: LOOP_ORDER, legs, from_entrance: d(layout.entrance, layout.gate(LOOP_ORDER[0])) }
    }

    /// Length of one full lap in cells.
    pub fn lap_length(&self) -> u32 {
        self.legs.iter().sum()
    }
}

/// Next gate to try. `found_full` are the stations seen full since the
/// vehicle last entered anything. Occupancy is deliberately not an input.
pub fn next_target(v: &Vehicle, from: LoopPosition, found_full: StationSet) -> StationKind {
    let start = match from {
        LoopPosition::Entrance => 0,
        LoopPosition::At(k) => (LOOP_ORDER.iter().position(|&o| o == k).expect("loop covers all kinds") + 1) % 5,
    };
    let remaining = v.remaining_stations();
    (0..5)
        .map(|i| LOOP_ORDER[(start + i) % 5])
        .find(|&k| remaining.contains(k) && v.prerequisites_met(k) && !found_full.contains(k))
        .unwrap_or(StationKind::Parking)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Enter,
    Continue,
    Stranded,
}

/// What a vehicle does on reaching `kind`'s gate. Only the load of that one
/// station is consulted.
pub fn on_gate_arrival(kind: StationKind, load: &StationLoad) -> GateDecision {
    if load.occupied + load.permanent_holds < load.berths {
        GateDecision::Enter
    } else if kind == StationKind::Parking {
        GateDecision::Stranded
    } else {
        GateDecision::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::VehicleId;
    use crate::yard::{builtin_layout, YardSize};
    use StationKind::*;

    fn vehicle(done: &[StationKind]) -> Vehicle {
        let mut v = Vehicle::new(VehicleId(0), 0.0, 3600.0, 1.0);
        v.completed = done.iter().copied().collect();
        v
    }

    fn full(set: &[StationKind]) -> StationSet {
        set.iter().copied().collect()
    }

    #[test]
    fn first_target_from_entrance_is_charging() {
        assert_eq!(next_target(&vehicle(&[]), LoopPosition::Entrance, StationSet::EMPTY), Charging);
        assert_eq!(next_target(&vehicle(&[Charging]), LoopPosition::Entrance, StationSet::EMPTY), Inspection);
    }

    #[test]
    fn full_gate_moves_on_to_the_next_needed() {
        let v = vehicle(&[]);
        assert_eq!(next_target(&v, LoopPosition::At(Charging), full(&[Charging])), Inspection);
        assert_eq!(next_target(&v, LoopPosition::At(Inspection), full(&[Charging, Inspection])), Cleaning);
        // loading is skipped while its prerequisites are open
        assert_eq!(next_target(&v, LoopPosition::At(Cleaning), full(&[Charging, Inspection, Cleaning])), Parking);
    }

    #[test]
    fn loop_wraps_around() {
        let v = vehicle(&[Inspection, Cleaning]);
        assert_eq!(next_target(&v, LoopPosition::At(Cleaning), StationSet::EMPTY), Charging);
        assert_eq!(next_target(&v, LoopPosition::At(Parking), StationSet::EMPTY), Charging);
        let v = vehicle(&[Charging, Inspection, Cleaning]);
        assert_eq!(next_target(&v, LoopPosition::At(Parking), StationSet::EMPTY), Loading);
        assert_eq!(next_target(&v, LoopPosition::At(Loading), full(&[Loading])), Parking);
    }

    #[test]
    fn gate_decisions() {
        let load = |berths, occupied, holds| StationLoad { berths, occupied, permanent_holds: holds, inbound: 0 };
        assert_eq!(on_gate_arrival(Cleaning, &load(2, 1, 0)), GateDecision::Enter);
        assert_eq!(on_gate_arrival(Cleaning, &load(2, 2, 0)), GateDecision::Continue);
        assert_eq!(on_gate_arrival(Parking, &load(3, 2, 1)), GateDecision::Stranded);
        assert_eq!(on_gate_arrival(Parking, &load(3, 1, 1)), GateDecision::Enter);
    }

    #[test]
    fn route_legs_are_static_distances() {
        let layout = builtin_layout(YardSize::Small);
        let route = LoopRoute::new(&layout);
        assert_eq!(route.order, LOOP_ORDER);
        for i in 0..5 {
            let a = layout.gate(LOOP_ORDER[i]);
            let b = layout.gate(LOOP_ORDER[(i + 1) % 5]);
            assert_eq!(route.legs[i], grid_distance(&layout, a, b).unwrap());
        }
        assert!(route.lap_length() > 0);
        assert_eq!(LoopRoute::new(&layout).legs, route.legs);
    }
}
