//! Micro-expression spotting in conversational video.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`data`]: clips, annotations, the manifest format and training targets;
//! * [`synth`]: a deterministic synthetic corpus with speech interference;
//! * [`model`]: encoder, Bi-LSTM context, query-token enhancer and heads;
//! * [`losses`]: focal loss, the boundary-aware localization loss, the
//!   multi-task objective and baseline locator losses;
//! * [`eval`]: segment decoding, IoU matching and dialogue-role F1;
//! * [`train`]: the training loop, loss ablation and gradient checks.
//!
//! ```no_run
//! use meldae::train::{train, RunConfig};
//!
//! let mut cfg = RunConfig::default();
//! cfg.output_dir = "runs/demo".into();
//! let outcome = train(&cfg).unwrap();
//! println!("final f1_dr = {:.3}", outcome.log.last().unwrap().f1_dr);
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};

// The book's code listings run as doctests, one module per chapter so a
// failure points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data-model.md")]
    mod data_model {}
    #[doc = include_str!("../../../book/src/synthetic-corpus.md")]
    mod synthetic_corpus {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
