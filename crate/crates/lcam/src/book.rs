//! The guide's chapters, compiled as doc-tests.
//!
//! mdBook renders `book/` but cannot execute its code blocks; `cargo test
//! --doc` can. Including each chapter as the documentation of an (empty)
//! module turns every Rust block in the book into a doc-test, so the guide
//! breaks the build the moment it drifts from the library. One module per
//! chapter keeps test failures attributable to a file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/attention-maps.md")]
pub mod attention_maps {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training_the_head {}

#[doc = include_str!("../../../book/src/explanations.md")]
pub mod explanations {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod measuring_faithfulness {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}

#[doc = include_str!("../../../book/src/error-reports.md")]
pub mod error_reports {}

#[doc = include_str!("../../../book/src/full-scale-protocol.md")]
pub mod full_scale_protocol {}
