//! Multimodal graph prompt learning over volumetric patch tokens.
//!
//! Volumes are cut into patches and tokenized per modality, tokens are weighted by
//! their similarity to text concepts of the subject's category, connected into a
//! concept-similarity graph with a GCN prompt, and classified by a transformer
//! encoder with a cosine head over concept embeddings.

pub mod concepts;
pub mod config;
pub mod encoder;
mod error;
pub mod export;
pub mod graphprompt;
pub mod model;
pub mod relevance;
pub mod run;
pub mod synthgen;
pub mod trainer;
pub mod voltok;

pub use error::{Error, Result};
pub use mmgpl_diffcore as diffcore;
