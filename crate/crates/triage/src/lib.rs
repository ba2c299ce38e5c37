//! Analyst review service over a finished pipeline run.

pub mod api;
pub mod session;

pub use api::{router, serve, Shared};
pub use session::{Artifacts, TriageError, TriageSession};
