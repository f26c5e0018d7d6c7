//! Criterion benchmarks for the `sdtm` crate; see the `benches` directory.
