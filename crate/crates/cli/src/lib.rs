//! Library half of the `iterlabel` binary: the run-file schema and the HTTP
//! task service.

pub mod config;
pub mod service;

pub use config::RunConfig;
pub use service::{router, AppState};
