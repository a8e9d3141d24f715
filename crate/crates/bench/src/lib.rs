//! Criterion benchmarks for coal-core kernels; see `benches/`.
