//! Compiles the book chapters so their code listings run as doc-tests.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/etf.md")]
pub mod etf {}
#[doc = include_str!("../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../book/src/partitioning.md")]
pub mod partitioning {}
#[doc = include_str!("../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../book/src/diagnostics.md")]
pub mod diagnostics {}
#[doc = include_str!("../../book/src/finetuning.md")]
pub mod finetuning {}
#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
