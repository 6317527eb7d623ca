//! Bidirectional text and image retrieval for choosing news photos.
//!
//! Articles (headline, lead, caption, body) and image features are encoded
//! into one space scored by inner product. See the guide in `book/` for a
//! walk-through.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod retrieval;
pub mod textprep;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/text-preparation.md")]
    struct TextPreparation;
    #[doc = include_str!("../../../book/src/encoders.md")]
    struct Encoders;
    #[doc = include_str!("../../../book/src/objectives.md")]
    struct Objectives;
    #[doc = include_str!("../../../book/src/fusion.md")]
    struct Fusion;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    struct Retrieval;
    #[doc = include_str!("../../../book/src/service.md")]
    struct Service;
}
