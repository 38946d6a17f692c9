//! Attribute-aware complementary clothing recommendation.
//!
//! A convolutional backbone turns each garment image into a feature map;
//! K attribute blocks pool it into per-attribute representations that are
//! weakly supervised by attribute labels. For a top/bottom pair, each item
//! attends over its own attributes conditioned on the partner's global
//! embedding, a category-pair projection produces a K×K attribute
//! compatibility matrix, and the attention-weighted sum of that matrix is the
//! pair score. Scores are trained with a pairwise ranking loss and the
//! weighted matrix doubles as an attribute-level explanation.

pub mod attention;
pub mod attributes;
pub mod backbone;
pub mod checkpoint;
pub mod compat;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{AfrecError, Result};
