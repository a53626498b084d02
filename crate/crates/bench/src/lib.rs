//! Criterion benchmarks for the prediction pipeline; see `benches/`.
