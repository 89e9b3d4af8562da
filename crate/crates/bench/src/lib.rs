//! Criterion benchmarks for the atlas engine live in `benches/`.
