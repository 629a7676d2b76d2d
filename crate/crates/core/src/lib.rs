//! Federated low-rank fine-tuning simulator.
//!
//! * [`linalg`]: dense matrices, Jacobi SVD, seeded Gaussian sampling.
//! * [`model`]: linear and two-layer teacher-student tasks with per-sample gradients.
//! * [`adapters`]: LoRA, frozen-`A` LoRA and SB-triple parameterizations, plus the wire layout.
//! * [`aggregation`]: the five server-side aggregation rules and the divergence diagnostic.
//! * [`privacy`]: DP-SGD, the RDP accountant and noise decompositions.
//! * [`fedsim`]: partitioning, local training and the round loop.
//! * [`commcost`]: closed-form communication counts and the measured ledger.
//! * [`config`], [`report`], [`verify`]: experiment files, artifacts and the invariant suite.

pub mod adapters;
pub mod aggregation;
pub mod commcost;
pub mod config;
pub mod fedsim;
pub mod linalg;
pub mod model;
pub mod privacy;
pub mod report;
pub mod seeds;
pub mod verify;
