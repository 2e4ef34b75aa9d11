//! Decision-tree conversation engine.

pub mod baseline;
pub mod eval;
pub mod gateway;
pub mod ingest;
pub mod orchestrator;
pub mod session;
pub mod store;
pub mod synthetic;
pub mod template;
pub mod tree;
pub mod validate;
