//! Cluster-specific contrasts for ranking differentially expressed features.
//!
//! Genes are clustered by a mixture of linear mixed models. Each gene is
//! then scored by a contrast of its cluster's class means plus its own
//! random effects, weighted over clusters by posterior membership. A
//! permutation null calibrates the score, and BH or local-FDR rules select
//! features. See the guide in `book/` for a walkthrough.

// Negated comparisons are deliberate: they send NaN down the error path.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod contrast;
pub mod data;
pub mod em;
pub mod error;
pub mod fdr;
pub mod format;
pub mod lmm;
pub mod null;
pub mod seed;
pub mod sim;
pub mod ttest;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};

// The guide's code listings run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/contrasts.md")]
    mod contrasts {}
    #[doc = include_str!("../../../book/src/null.md")]
    mod null {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
