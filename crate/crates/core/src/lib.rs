//! Shared RFID tag infrastructure: tag words that embed the service
//! address, per-system policy filtering, virtual readers / middleware /
//! ONS / service centers over a VPN overlay, and a deterministic simulator
//! for the two ID transmission pipelines.

pub mod codec;
pub mod elements;
pub mod network;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod scenario;
pub mod sim;

pub use codec::{decode, encode, CodecError, PolicyNumber, SystemId, TagId, TagWord, VirtualNetworkAddress};
pub use elements::{Infrastructure, ServiceSystemDescriptor};
pub use network::{Network, NodeId, VpnId};
pub use par::Execution;
pub use pipeline::Mode;
pub use policy::{PolicyDefinition, PolicyTable, PolicyVerdict};
pub use report::{MetricsReport, ReportFormat};
pub use scenario::{load_scenario, Scenario, ScenarioError};
pub use sim::{compare_modes, run, run_sweep, RunError, RunOptions, RunResult};
