//! Downlink scheduling with HARQ retransmissions and decode-and-forward relays.
//!
//! The crate models a base station serving `N` users through up to `M`
//! relays, derives priority-index policies from a Klimov-type queueing
//! transformation, and checks them against an exact MDP solver and a
//! slot-level simulator.

pub mod certify;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod klimov;
pub mod model;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod sim;

pub use channel::DecodeModel;
pub use error::{Error, Result};
pub use model::{
    BaseStationState, ConvexCost, RelayState, SchedulingDecision, SlotOutcome, SystemConfig,
    SystemState, Transmitter,
};
pub use par::Execution;
pub use policy::{index_table, IndexTable, Policy, PolicyKind};
