//! Criterion benchmarks for the flow, SCM, ComBat and MLP hot paths; see
//! `benches/pipeline.rs`.
