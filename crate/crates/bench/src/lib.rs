//! Criterion benchmarks for the tensor kernels and a full training step;
//! see `benches/`.
