//! HTTP feedback service around the capfeed captioner, and a simulated-user
//! client that drives it from ground-truth captions.

pub mod app;
pub mod backend;
pub mod config;
pub mod sim;

pub use app::{router, serve, AppState};
pub use backend::HttpBackend;
pub use config::ServiceConfig;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] capfeed::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("http: {0}")]
    Http(String),
}
