//! Experiment service: projects, the experiment lifecycle, jobs, active
//! learning, golden evaluation and the HTTP API.

pub mod analysis;
pub mod http;
pub mod meta;
pub mod model;
pub mod service;
pub mod state;

pub use service::{Service, ServiceConfig};
