//! Benchmarks for `ovv-core` live under `benches/`.
