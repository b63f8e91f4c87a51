//! Criterion benchmarks live in benches/; see hot_paths.rs.
