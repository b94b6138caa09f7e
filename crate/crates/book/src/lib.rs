//! Runs the code blocks of the guide in `book/src` as doc-tests.
//!
//! mdbook cannot test snippets that depend on outside crates, so each chapter
//! is pulled in as the docs of an empty module and `cargo test --doc` does the
//! rest. A failing test is reported against the module named after its
//! chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tail-fitting.md")]
pub mod tail_fitting {}

#[doc = include_str!("../../../book/src/ranking.md")]
pub mod ranking {}

#[doc = include_str!("../../../book/src/toy-network.md")]
pub mod toy_network {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
