//! Toy-scale multi-stage retrieval: transformer encoders written from scratch,
//! bi-encoder retrieval, cross-encoder reranking, hard-negative mining,
//! vector search, NDCG evaluation and latency profiling.
//!
//! Model code is generic over the scalar type; the aliases below name the
//! two instantiations used in practice.

pub mod biencoder;
pub mod checkpoint;
pub mod corpus;
pub mod crossencoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod index;
pub mod losses;
pub mod mining;
pub mod optim;
pub mod perf;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod xformer;

pub use error::{Error, Result};

pub type Backbone64 = xformer::Backbone<f64>;
pub type Backbone32 = xformer::Backbone<f32>;
pub type Reranker64 = crossencoder::RerankerModel<f64>;
pub type Reranker32 = crossencoder::RerankerModel<f32>;
pub type Embedder64 = biencoder::EmbedderModel<f64>;
pub type Embedder32 = biencoder::EmbedderModel<f32>;
