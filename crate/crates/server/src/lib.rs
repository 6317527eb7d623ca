//! HTTP service and command-line jobs over `nir-core`.

pub mod api;
pub mod cli;
pub mod jobs;
pub mod registry;
pub mod snapshot;

pub use api::{router, AppState};
pub use registry::Registry;
pub use snapshot::{ApiError, ModelSnapshot, SearchRequest, SearchResponse};
