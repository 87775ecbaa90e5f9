//! Word segmentation as character-level translation with a delimiter token.
//!
//! The core crate is `no_std` (it needs `alloc`). It holds everything that is
//! pure computation: text normalization and the vocabulary, data
//! augmentation, a small reverse-mode autodiff engine, the encoder-decoder
//! segmenter and the character language model, the training loop, beam
//! search and scoring. File formats and the command line live in the
//! `segtrans` crate.
//!
//! A segmented sentence `我 会 游泳` becomes the training pair
//!
//! ```text
//! source: 我 会 游 泳
//! target: 我 ⟨D⟩ 会 ⟨D⟩ 游 泳 </s>
//! ```
//!
//! and the model learns to insert the delimiter token `⟨D⟩`.

#![no_std]

extern crate alloc;

pub mod augment;
pub mod compute;
pub mod data;
pub mod decode;
pub mod eval;
mod math;
pub mod model;
pub mod rng;
pub mod train;

pub use data::{SegmentedSentence, Symbol, Token, Vocabulary};
