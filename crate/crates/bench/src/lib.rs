//! Criterion benchmarks for the hot paths of `lrbench-core`; see `benches/`.
