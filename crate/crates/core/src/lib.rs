//! Text–scene retrieval engine: knowledge-graph embeddings, knowledge-guided
//! text encoding, shared-codebook alignment of BEV scene features with text,
//! and cosine top-k retrieval over the aligned space.

pub mod align;
pub mod captions;
pub mod error;
pub mod kg;
pub mod retrieval;
pub mod scene;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor;
