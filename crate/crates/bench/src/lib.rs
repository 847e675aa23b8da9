//! Benchmarks for the estimation and testing pipeline; see `benches/`.
