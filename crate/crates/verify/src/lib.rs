//! Holds the `acceptance` test target; see `tests/acceptance.rs`.
//!
//! It lives in its own package so a failing criterion does not stop
//! `cargo test --workspace` before the other suites have run.
