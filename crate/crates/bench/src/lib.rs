//! Benchmarks for the resampling operators, baselines and generator passes; see `benches/`.
