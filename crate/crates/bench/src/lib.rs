//! Criterion harness lives under `benches/`; this crate has no library API.
