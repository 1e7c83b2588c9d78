//! Self-supervised whole-slide representation learning over bags of
//! precomputed patch embeddings.
//!
//! A slide is a [`SlideBag`]: an `n × d` embedding matrix plus integer grid
//! coordinates. Training draws two [`TokenView`]s per slide with
//! split/crop/mask transformations, encodes them with a small transformer
//! ([`encoder::Encoder`] + [`posembed::PosEmbed`]), and optimizes one of four
//! pair objectives. Evaluation runs kNN and linear probes on frozen
//! full-slide features.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bagstore;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod posembed;
pub mod rng;
pub mod trainer;
pub mod transforms;

pub use bagstore::{Dataset, SlideBag, SplitTag, SyntheticSpec};
pub use error::{Error, Result};
pub use rng::RandomSource;
pub use transforms::{TokenView, TransformConfig};
