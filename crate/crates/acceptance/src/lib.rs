//! End-to-end acceptance checks for `relpose`; see `tests/acceptance.rs`.
