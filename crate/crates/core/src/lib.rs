//! A desk-scale laboratory for probing the shared embedding space of a toy
//! two-tower image-text model: train the model contrastively on a synthetic
//! shapes corpus, perturb images by gradient descent until their embeddings
//! match arbitrary target-text embeddings, and measure the result with
//! distortion, image-quality, distribution, projection, and noise-probe
//! detection metrics.

pub mod attack;
pub mod corpus;
pub mod encoder;
pub mod graph;
mod linalg;
pub mod model;
pub mod tensor;
pub mod train;

pub use attack::{align_loss, clamp_to_domain, run_alignment, AttackConfig, AttackError, AttackResult, AttackState, ClampMode, TraceRecord};
pub use corpus::{generate_corpus, tokenize, CorpusItem, CorpusSpec, Split, Vocabulary};
pub use encoder::{
    argmax, encode_image, encode_text, normalize_embedding, patchify, zero_shot_classify,
    Embedding, ModelError,
};
pub use graph::{finite_diff_gradient, max_relative_error, Graph, Var};
pub use model::{AttentionParams, BlockParams, ModelConfig, ModelParams};
pub use tensor::{Tensor, TensorError};
pub use train::{contrastive_train, evaluate_zero_shot, TrainConfig, TrainError};
