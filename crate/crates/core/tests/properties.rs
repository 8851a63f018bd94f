use std::sync::Arc;

use proptest::prelude::*;

use marshal_core::engine::{EventKind, ServiceTime};
use marshal_core::experiment::{read_runs_csv, read_summary_csv, MatrixCell, RUNS_FILE, SUMMARY_FILE};
use marshal_core::{
    aggregate, builtin_layout, parse_layout, run, run_matrix, Controller, RunStatus, ScenarioMatrix, SimConfig,
    SimParams, YardLayout, YardSize,
};

fn layout(size: YardSize) -> Arc<YardLayout> {
    Arc::new(builtin_layout(size))
}

fn controller(i: u8) -> Controller {
    Controller::ALL[i as usize % 2]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn runs_conserve_vehicles_and_respect_capacity(
        size in 0usize..3,
        demand in 0u32..120,
        c in 0u8..2,
        seed in any::<u64>(),
    ) {
        let cfg = SimConfig::new(layout(YardSize::ALL[size]), controller(c), demand as f64, seed);
        let out = run(&cfg).unwrap();
        prop_assert!(out.is_conserved(), "{:?}", out);
        prop_assert!(out.audit.is_clean(), "{:?}", out.audit);
        prop_assert_eq!(out.audit.teleports, 0);
        prop_assert_eq!(out.audit.capacity_violations, 0);
        if out.status == RunStatus::Completed {
            prop_assert_eq!(out.in_yard, 0);
            prop_assert_eq!(out.stranded, 0);
        }
        let exits = out.events.iter().filter(|e| e.kind == EventKind::Exited).count() as u32;
        prop_assert_eq!(exits, out.exited_count);
    }

    #[test]
    fn equal_seeds_give_equal_event_logs(demand in 1u32..60, c in 0u8..2, seed in any::<u64>()) {
        let cfg = SimConfig::new(layout(YardSize::Small), controller(c), demand as f64, seed);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        prop_assert_eq!(a.events, b.events);
        prop_assert_eq!(a.status, b.status);
    }

    #[test]
    fn ample_capacity_never_parks(demand in 1u32..30, seed in any::<u64>()) {
        let mut cfg = SimConfig::new(layout(YardSize::Large), Controller::Orchestrated, demand as f64, seed);
        cfg.window = 1800.0;
        let out = run(&cfg).unwrap();
        prop_assume!(out.arrivals <= 40);
        prop_assert!(out.events.iter().all(|e| !(e.kind == EventKind::Assigned && e.detail == "parking")));
        prop_assert!(out.events.iter().all(|e| e.kind != EventKind::Parked));
    }
}

#[test]
fn single_vehicle_timeline() {
    let rows = ["CIWLP#", "ciwlp#", "E....X", "######", "######", "######"];
    let layout = Arc::new(parse_layout(&rows.join("\n")).unwrap());
    // E -> c, then gate to gate along row 1, then l -> X around the parking gate
    let travel = 1 + 1 + 1 + 1 + 3;
    for c in Controller::ALL {
        let mut cfg = SimConfig::new(layout.clone(), c, 0.0, 5);
        cfg.arrival_times = Some(vec![0.0]);
        cfg.inspection_fail_rate = 0.0;
        let d = &mut cfg.service;
        for s in [&mut d.charging, &mut d.inspection, &mut d.cleaning, &mut d.loading, &mut d.parking] {
            *s = ServiceTime { mean: s.mean, sd: 0.0 };
        }
        let dt = cfg.tick_seconds();
        let service_ticks: u32 =
            [3600.0f64, 600.0, 1200.0, 1200.0].iter().map(|s| (s / dt - 1e-9).ceil() as u32).sum();
        let out = run(&cfg).unwrap();
        assert_eq!(out.status, RunStatus::Completed, "{c}");
        assert_eq!(out.exited_count, 1);
        let exit_tick = out.events.iter().find(|e| e.kind == EventKind::Exited).unwrap().tick;
        assert_eq!(exit_tick, travel + service_ticks, "{c}");
        let exit_s = out.last_exit_time.unwrap();
        assert!((exit_s - (travel as f64 * dt + 110.0 * 60.0)).abs() < 4.0 * dt, "{c}: {exit_s}");
    }
}

#[test]
fn emitted_summary_matches_recomputed_records() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = ScenarioMatrix {
        cells: vec![
            MatrixCell { name: "small".into(), layout: layout(YardSize::Small), demands: vec![10, 95] },
            MatrixCell { name: "medium".into(), layout: layout(YardSize::Medium), demands: vec![20] },
        ],
        replications: 3,
        base_seed: 99,
        params: SimParams { window: 2.0 * 3600.0, ..SimParams::default() },
        ..ScenarioMatrix::default()
    };
    let result = run_matrix(&matrix, 1, Some(dir.path())).unwrap();
    let records = read_runs_csv(&dir.path().join(RUNS_FILE)).unwrap();
    assert_eq!(records, result.records);
    let recomputed = aggregate(&records, matrix.base_seed, matrix.params.window);
    assert_eq!(recomputed, result.stats);
    let summary = read_summary_csv(&dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.len(), recomputed.cells.len());
    for (a, b) in summary.iter().zip(&recomputed.cells) {
        assert_eq!((&a.size, a.demand, a.controller, a.runs), (&b.size, b.demand, b.controller, b.runs));
        assert!((a.failure_rate - b.failure_rate).abs() < 1e-9);
    }
}

#[test]
fn adding_replications_keeps_earlier_records() {
    let base = ScenarioMatrix {
        cells: vec![MatrixCell { name: "small".into(), layout: layout(YardSize::Small), demands: vec![8] }],
        replications: 2,
        params: SimParams { window: 3600.0, ..SimParams::default() },
        ..ScenarioMatrix::default()
    };
    let more = ScenarioMatrix { replications: 4, ..base.clone() };
    let a = run_matrix(&base, 1, None).unwrap().records;
    let b = run_matrix(&more, 1, None).unwrap().records;
    for r in &a {
        assert!(b.contains(r), "{r:?}");
    }
}
