//! Experiments-as-code pipeline: experiment documentation and lifecycle,
//! chunked telemetry protocol and assembly, completion codes, simulated
//! participants, experiment management and statistical analysis.

pub mod analysis;
pub mod api;
pub mod assembly;
pub mod clientsim;
pub mod completion;
pub mod management;
pub mod manifest;
pub mod protocol;
pub mod server;
