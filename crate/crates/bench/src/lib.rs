//! Benchmarks only; see `benches/solvers.rs`.
