//! Desk-scale acceptance experiments. The criteria live in
//! `tests/acceptance.rs`; this crate has no library code.
