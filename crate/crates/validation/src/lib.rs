//! End-to-end acceptance suite for the workspace.
//!
//! The suite lives in `tests/acceptance.rs` and runs with
//! `cargo test -p vamp-validation --test acceptance`. It trains the full mode × seed grid,
//! so it sits in its own package and runs after the unit and integration tests of the
//! other crates.
