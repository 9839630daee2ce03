//! Entity-level temporal transaction graphs from raw Bitcoin block files.
//!
//! The crate is organised as a sequence of stages, each usable on its own:
//!
//! * [`chain`] decodes `blk*.dat` files, orders blocks into the main chain and
//!   classifies locking scripts.
//! * [`filters`] flags CoinJoin and colored-coin transactions.
//! * [`resolve`] links inputs to the outputs they spend.
//! * [`cluster`] merges scripts into entities with the common-input heuristic.
//! * [`edges`] and [`nodes`] derive value transfers and aggregate them into the
//!   edge and node tables.
//! * [`labels`] propagates address labels onto clusters.
//! * [`features`] derives model features and fits the log-quantile normalizer.
//! * [`store`] persists the graph with forward and reverse adjacency indexes.
//! * [`sampler`] extracts bounded-fanout neighborhoods around labeled nodes.
//! * [`pipeline`] wires everything together behind the `forge` binary.

pub mod amount;
pub mod chain;
pub mod cluster;
pub mod edges;
pub mod features;
pub mod filters;
pub mod labels;
pub mod nodes;
pub mod pipeline;
pub mod resolve;
pub mod sampler;
pub mod store;
pub mod synth;

pub use amount::Amount;
pub use chain::{Hash256, RawTransaction, ScriptDescriptor, ScriptId, ScriptKind};
pub use cluster::{ClusterAlias, ClusterIndex};
pub use edges::{EdgeRecord, TransferEvent};
pub use nodes::NodeRecord;
