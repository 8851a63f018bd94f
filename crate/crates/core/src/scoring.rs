//! Priority scores and the vehicle ranking used for assignment and right-of-way.
//!
//! `p = 60·b + 20·c + 5·t + τ` where `b` is the reciprocal of the remaining
//! charge time in hours (capped at one minute), `c` the number of finished
//! circuit stations, `t` the seconds spent in the yard beyond the expected
//! circuit time and `τ` the trust score.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::vehicle::{Vehicle, VehicleId};

/// Smallest remaining charge time used in the reciprocal, in hours.
pub const MIN_CHARGE_HOURS: f64 = 1.0 / 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub charge: f64,
    pub circuit: f64,
    pub lateness: f64,
    pub trust: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights { charge: 60.0, circuit: 20.0, lateness: 5.0, trust: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorityScore {
    pub total: f64,
    pub charge_term: f64,
    pub circuit_term: f64,
    pub lateness_term: f64,
    pub trust_term: f64,
    pub entry_time: f64,
    pub id: VehicleId,
}

impl PriorityScore {
    /// Descending total, then earlier entry, then smaller id.
    pub fn rank_cmp(&self, other: &PriorityScore) -> Ordering {
        other
            .total
            .total_cmp(&self.total)
            .then(self.entry_time.total_cmp(&other.entry_time))
            .then(self.id.cmp(&other.id))
    }
}

/// `b`, per hour.
pub fn charge_urgency(remaining_charge_seconds: f64) -> f64 {
    1.0 / (remaining_charge_seconds / 3600.0).max(MIN_CHARGE_HOURS)
}

/// `t`, seconds past the expected circuit time, never negative.
pub fn lateness(entry_time: f64, now: f64, expected_circuit_time: f64) -> f64 {
    ((now - entry_time) - expected_circuit_time).max(0.0)
}

pub fn priority_score(
    v: &Vehicle,
    now: f64,
    expected_circuit_time: f64,
    weights: &ScoreWeights,
) -> PriorityScore {
    let charge_term = weights.charge * charge_urgency(v.remaining_charge_time);
    let circuit_term = weights.circuit * v.completed.len() as f64;
    let lateness_term = weights.lateness * lateness(v.entry_time, now, expected_circuit_time);
    let trust_term = weights.trust * v.trust_score;
    PriorityScore {
        total: charge_term + circuit_term + lateness_term + trust_term,
        charge_term,
        circuit_term,
        lateness_term,
        trust_term,
        entry_time: v.entry_time,
        id: v.id,
    }
}

/// Score and sort, highest priority first.
pub fn rank_vehicles<'a, I>(
    vehicles: I,
    now: f64,
    expected_circuit_time: f64,
    weights: &ScoreWeights,
) -> Vec<PriorityScore>
where
    I: IntoIterator<Item = &'a Vehicle>,
{
    let mut scores: Vec<PriorityScore> = vehicles
        .into_iter()
        .map(|v| priority_score(v, now, expected_circuit_time, weights))
        .collect();
    scores.sort_by(PriorityScore::rank_cmp);
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::yard::StationKind::*;
    use proptest::prelude::*;

    fn vehicle(id: u32, entry: f64, charge_s: f64, done: usize, trust: f64) -> Vehicle {
        let mut v = Vehicle::new(VehicleId(id), entry, charge_s, trust);
        v.completed = [Charging, Inspection, Cleaning, Loading].into_iter().take(done).collect();
        v
    }

    #[test]
    fn charge_urgency_cases() {
        assert_eq!(charge_urgency(7200.0), 0.5);
        assert_eq!(charge_urgency(3600.0), 1.0);
        assert_eq!(charge_urgency(0.0), 60.0);
        assert_eq!(charge_urgency(30.0), 60.0);
    }

    #[test]
    fn lateness_cases() {
        assert_eq!(lateness(100.0, 1100.0, 1000.0), 0.0);
        assert_eq!(lateness(100.0, 1130.0, 1000.0), 30.0);
        assert_eq!(lateness(100.0, 1090.0, 1000.0), 0.0);
    }

    #[test]
    fn hand_evaluated_scores() {
        let w = ScoreWeights::default();
        // b = 1.0, c = 2, t = 0, tau = 5
        let s = priority_score(&vehicle(0, 0.0, 3600.0, 2, 5.0), 10.0, 1000.0, &w);
        assert_eq!(s.total, 105.0);
        // b = 0.5, c = 3, t = 10, tau = 2: charging is not done here on purpose,
        // the formula does not look at which stations make up c.
        let mut v = vehicle(1, 0.0, 7200.0, 0, 2.0);
        v.completed = [Inspection, Cleaning, Loading].into_iter().collect();
        let s = priority_score(&v, 1010.0, 1000.0, &w);
        assert_eq!((s.charge_term, s.circuit_term, s.lateness_term, s.trust_term), (30.0, 60.0, 50.0, 2.0));
        assert_eq!(s.total, 142.0);
    }

    #[test]
    fn zero_weights_give_zero() {
        let w = ScoreWeights { charge: 0.0, circuit: 0.0, lateness: 0.0, trust: 0.0 };
        assert_eq!(priority_score(&vehicle(0, 0.0, 0.0, 0, 0.0), 0.0, 0.0, &w).total, 0.0);
    }

    #[test]
    fn ranking_order_and_ties() {
        let w = ScoreWeights::default();
        let a = vehicle(0, 0.0, 3600.0, 2, 5.0);
        let mut b = vehicle(1, 0.0, 7200.0, 0, 2.0);
        b.completed = [Inspection, Cleaning, Loading].into_iter().collect();
        let ranked = rank_vehicles([&a, &b], 1010.0, 1000.0, &w);
        // 155 vs 142
        assert_eq!(ranked.iter().map(|s| s.id).collect::<Vec<_>>(), vec![VehicleId(0), VehicleId(1)]);

        let late = vehicle(7, 20.0, 3600.0, 1, 3.0);
        let early = vehicle(9, 10.0, 3600.0, 1, 3.0);
        let ranked = rank_vehicles([&late, &early], 30.0, 1e6, &w);
        assert_eq!(ranked[0].id, VehicleId(9));

        let same_a = vehicle(4, 10.0, 3600.0, 1, 3.0);
        let same_b = vehicle(2, 10.0, 3600.0, 1, 3.0);
        let ranked = rank_vehicles([&same_a, &same_b], 30.0, 1e6, &w);
        assert_eq!(ranked[0].id, VehicleId(2));

        assert!(rank_vehicles(std::iter::empty::<&Vehicle>(), 0.0, 0.0, &w).is_empty());
    }

    proptest! {
        #[test]
        fn score_is_monotone(
            charge in 0.0f64..7200.0,
            done in 0usize..4,
            trust in 0.0f64..10.0,
            dtrust in 0.0f64..5.0,
            elapsed in 0.0f64..20000.0,
            extra in 0.0f64..5000.0,
        ) {
            let w = ScoreWeights::default();
            let base = priority_score(&vehicle(0, 0.0, charge, done, trust), elapsed, 7000.0, &w);
            let more_done = priority_score(&vehicle(0, 0.0, charge, done + 1, trust), elapsed, 7000.0, &w);
            let more_trust = priority_score(&vehicle(0, 0.0, charge, done, trust + dtrust), elapsed, 7000.0, &w);
            let later = priority_score(&vehicle(0, 0.0, charge, done, trust), elapsed + extra, 7000.0, &w);
            prop_assert!(more_done.total >= base.total);
            prop_assert!(more_trust.total >= base.total);
            prop_assert!(later.total >= base.total);
            prop_assert!(base.charge_term >= 0.0 && base.lateness_term >= 0.0);
            prop_assert_eq!(
                base.total,
                base.charge_term + base.circuit_term + base.lateness_term + base.trust_term
            );
        }

        #[test]
        fn ranking_is_a_sorted_permutation(
            specs in proptest::collection::vec((0.0f64..100.0, 0.0f64..7200.0, 0usize..5, 0.0f64..10.0), 0..12)
        ) {
            let w = ScoreWeights::default();
            let vs: Vec<Vehicle> = specs
                .iter()
                .enumerate()
                .map(|(i, &(entry, charge, done, trust))| vehicle(i as u32, entry.round(), charge, done, trust.round()))
                .collect();
            let ranked = rank_vehicles(&vs, 5000.0, 4000.0, &w);
            let mut ids: Vec<u32> = ranked.iter().map(|s| s.id.0).collect();
            for pair in ranked.windows(2) {
                prop_assert_eq!(pair[0].rank_cmp(&pair[1]), Ordering::Less);
                prop_assert_eq!(pair[1].rank_cmp(&pair[0]), Ordering::Greater);
            }
            ids.sort();
            prop_assert_eq!(ids, (0..vs.len() as u32).collect::<Vec<_>>());
        }
    }
}
