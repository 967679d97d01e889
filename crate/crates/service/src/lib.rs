//! Local HTTP service and command-line front end over a model bundle.

pub mod api;
pub mod cli;
pub mod service;

pub use service::{Service, ServiceError};
