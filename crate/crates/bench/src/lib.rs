//! Criterion benchmarks for the engine's hot paths live in `benches/`.
