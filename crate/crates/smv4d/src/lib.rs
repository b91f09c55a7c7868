//! End-to-end pipeline: configuration, the closed-loop trainer/sampler, the
//! evaluation protocol, and prediction serialization.

pub mod config;
pub mod evalproto;
pub mod gendata;
pub mod pipeline;
pub mod predio;
