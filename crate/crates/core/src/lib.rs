//! Marshaling-yard simulator.
//!
//! Vehicles enter a yard, visit charging, inspection, cleaning and loading
//! (loading last) and leave. Two controllers are compared: an orchestrated
//! one that ranks vehicles by a priority score and assigns stations with
//! live capacity knowledge, and an isolated one that drives a fixed loop and
//! only discovers a full station at its gate.

pub mod assignment;
pub mod baseline;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod oracle;
pub mod pathing;
pub mod scoring;
pub mod vehicle;
pub mod yard;

pub use assignment::{assign_one, replan, AssignError, ReplanOutcome, StationLoad, StationLoads, Trigger, WorldView};
pub use baseline::{next_target, on_gate_arrival, GateDecision, LoopPosition, LoopRoute};
pub use config::{load_layout, ConfigFileError, MatrixFile, SimParams};
pub use engine::{
    run, Controller, RunOutcome, RunStatus, ServiceDistributions, ServiceTime, SimConfig, SimError,
};
pub use experiment::{
    aggregate, failure_rate, run_matrix, throughput, AggregateStats, CellStats, ExperimentError, MatrixCell, RecordStatus,
    RunRecord, ScenarioMatrix,
};
pub use pathing::{plan_path, PathError, PathPlanner, ReservationTable, SpaceTimePath, Tick};
pub use scoring::{priority_score, rank_vehicles, PriorityScore, ScoreWeights};
pub use vehicle::{Position, StationSet, Target, Vehicle, VehicleId, VehicleStatus};
pub use yard::{
    builtin_layout, grid_distance, parse_layout, serialize_layout, validate_layout, Cell, LayoutError,
    StationKind, YardLayout, YardSize,
};
