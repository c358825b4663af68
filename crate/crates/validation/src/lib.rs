//! Acceptance checks for `xlmimo-core`. Everything lives in `tests/`; run
//! them with `cargo test -p xlmimo-validation --test acceptance`.
