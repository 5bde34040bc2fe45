//! HTTP session service: adaptive sessions over a loaded item bank, with
//! per-session JSONL journals for crash-safe persistence.

pub mod api;
pub mod config;
pub mod http;
pub mod journal;
pub mod service;

pub use api::API_SCHEMA;
pub use config::ServiceConfig;
pub use service::{Service, ServiceError};
