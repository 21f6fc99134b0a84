//! Holds the end-to-end acceptance suite in `tests/acceptance.rs`.
//! Kept as a separate package so it runs after the other suites.
