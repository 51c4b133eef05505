//! Actor state machines, the pay-on-completion baseline and the deterministic
//! simulator that drives end-to-end runs.
//!
//! A run is fully determined by its config and seed. Every message, ledger
//! transition and enclave event lands in the trace, and the verdict is
//! computed from the trace alone.

pub mod baseline;
mod broker;
mod client;
pub mod config;
pub mod message;
pub mod network;
mod node;
mod sim;
pub mod sweep;
pub mod trace;
pub mod verdict;

use thiserror::Error;

pub use config::{
    BrokerConfig, ClientBehavior, ClientConfig, CodeTamper, LinkAction, LinkPolicy, Mode, NodeBehavior, NodeConfig,
    ProgramConfig, Routing, ScenarioConfig, TaskConfig,
};
pub use message::{AuxData, BaselineJob, Message, TaskId, TaskPackage};
pub use network::{Fate, Packet, SimNetwork};
pub use sim::{run_scenario, ScenarioResult};
pub use sweep::{abort_sweep, adversarial_scenario, SweepPoint};
pub use trace::{read_trace, trace_to_string, write_trace, EnclaveEvent, TaskOutcome, TraceError, TraceRecord};
pub use verdict::{evaluate, Predicate, RunReport, Verdict};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
