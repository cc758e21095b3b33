//! Criterion benchmarks for the forward/backward hot paths; see `benches/`.
