//! Criterion benchmarks for the model and training hot paths; see `benches/`.
