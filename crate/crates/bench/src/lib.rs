//! Criterion benchmarks for the model, trainer and curation paths; see `benches/`.
