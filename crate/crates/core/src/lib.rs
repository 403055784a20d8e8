//! Ride-pool fleet dispatch.
//!
//! Every decision epoch the pending requests are grouped into feasible
//! per-vehicle actions, each action is scored as its immediate reward plus a
//! learned estimate of the vehicle's future value, and an exact
//! integer-programming assignment picks one action per vehicle. The value
//! function is trained off-policy from stored epochs with Bellman targets.
//!
//! Module map:
//!
//! * [`roadnet`]: road graph, shortest travel times, location embeddings.
//! * [`demand`]: requests, trip files, synthetic demand.
//! * [`fleet`]: vehicle state and the deterministic transitions.
//! * [`feasibility`]: per-vehicle feasible action generation.
//! * [`assign`]: exact branch-and-bound assignment solver.
//! * [`valuefn`]: the per-vehicle value network and its trainer.
//! * [`replay`]: prioritized experience memory.
//! * [`rebalance`]: min-cost transportation of idle vehicles.
//! * [`sim`]: epoch loop, training and evaluation drivers.
//! * [`verify`]: brute-force oracles used by tests and the `verify` command.

pub mod assign;
pub mod demand;
pub mod error;
pub mod feasibility;
pub mod fleet;
pub mod nn;
pub mod rebalance;
pub mod replay;
pub mod roadnet;
pub mod sim;
pub mod valuefn;
pub mod verify;

pub use assign::{Assignment, AssignmentInstance, SolveOptions};
pub use demand::{DelayLimits, EpochBatch, Request, RequestId};
pub use error::{Error, Result};
pub use feasibility::{FeasibleAction, FeasibleSet};
pub use fleet::{Position, Stop, StopKind, VehicleId, VehicleState};
pub use roadnet::{LocationEmbedding, LocationId, RoadNetwork};
pub use valuefn::{StateFeatures, TrainerState, ValueNetParams};

/// Wall-clock seconds since the start of the simulated day.
pub type Seconds = f64;

/// Slack used when comparing accumulated travel times against deadlines.
pub const TIME_EPS: f64 = 1e-6;
