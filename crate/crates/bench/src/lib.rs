//! Criterion benchmarks for the simulator and learner; see `benches/`.
