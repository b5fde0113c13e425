//! Load generation for the network server: virtual nodes and gateways that
//! speak the real wire protocols, a closed-loop scenario runner and
//! throughput sweeps.

pub mod fit;
pub mod gateway;
pub mod node;
pub mod radio;
pub mod scenario;
pub mod sweep;

pub use fit::{fit_knee, KneeFit};
pub use node::{node_step, AdrPolicy, Credentials, NodeConfig, NodeEvent, VirtualNode};
pub use scenario::{run_scenario, run_scenario_detailed, write_ndjson, LoadReport, ScenarioConfig, ScenarioError, ServerTarget};
pub use sweep::{sweep, sweep_concurrent, SweepConfig, SweepResult};
