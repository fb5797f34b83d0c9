//! Command line tools and the HTTP service around `faith-core`.
//!
//! The service keeps one session per process: a volume, the seeds placed on
//! it, the current model and the segmentation jobs started from it. All
//! routes live under `/api/v1`; see [`server::router`].

pub mod render;
pub mod seeds_file;
pub mod server;
pub mod session;
pub mod training;
