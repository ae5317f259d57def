//! TCP front end of the defended service.
//!
//! One JSON object per line in each direction. Answers carry only a request
//! id, label and confidence; everything the defense learned about a client
//! stays in the audit log.

pub mod client;
pub mod config;
pub mod server;
pub mod wire;

pub use client::{run_redteam, Client, RedTeamPlan, RedTeamSession};
pub use config::GatewayConfig;
pub use server::{export_audit, serve, Gateway, Server, ShutdownHandle};
pub use wire::{WireError, WireRequest, WireResponse};
