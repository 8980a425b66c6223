//! Student/teacher ensembling for unsupervised domain adaptation on small
//! fully connected networks.
//!
//! A student feature extractor and classifier are trained on labeled source
//! data while a discriminator, fed the outer product of features and class
//! predictions, tries to tell source from target. A gradient reversal layer
//! turns that game into one minimisation. A teacher copy of the student is
//! kept as a moving average of its weights, supplies a second condition to
//! the discriminator and anchors a consistency penalty.
//!
//! ```
//! use ren::datasets::BenchmarkSpec;
//! use ren::trainer::{run, TrainConfig, Variant};
//!
//! let mut spec = BenchmarkSpec::standard();
//! spec.n_source = 64;
//! spec.n_target = 64;
//! let data = spec.build(1).unwrap();
//! let cfg = TrainConfig { variant: Variant::Ren, total_steps: 20, eval_every: 10, ..TrainConfig::default() };
//! let out = run(&cfg, &data).unwrap();
//! assert_eq!(out.metrics.len(), 3);
//! assert!(out.net.teacher().is_some());
//! ```

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    mod conditioning {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
