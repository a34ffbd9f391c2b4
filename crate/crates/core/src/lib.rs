//! Simulation lab for inclusion-list extensions of leader-based BFT consensus.

// Quorum checks read as written in protocol terms (`>= 2 * f + 1`).
#![allow(clippy::int_plus_one)]

pub mod adversary;
pub mod checker;
pub mod consensus;
pub mod dissemination;
pub mod experiments;
pub mod metrics;
pub mod net;
pub mod scenario;
pub mod sim;
pub mod types;
pub mod variants;
pub mod verify;
