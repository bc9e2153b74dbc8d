//! Criterion benchmarks for anchorlab live under `benches/`.
