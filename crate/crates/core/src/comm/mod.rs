//! Simulated ranks, process groups and deterministic collectives with
//! per-collective traffic accounting.

pub mod collective;
mod ledger;
mod runtime;
mod topology;
mod volume;

pub use ledger::{LedgerEntry, TrafficLedger};
pub use runtime::{root_cause, ExecMode, Rank, World, WorldConfig};
pub use topology::{Axis, Coords, Layout, ProcessGroup, RankLayout, Topology};
pub use volume::{volume_compare_allgather_vs_all2all, TokenExchangeVolume};
