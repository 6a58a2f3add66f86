//! Criterion benchmarks for the renderer, tracker and deformation field live in `benches/`.
