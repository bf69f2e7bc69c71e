//! Uncertainty-guided intra-domain mixup (UIDM) for source-free
//! semi-supervised domain adaptation, at desk scale.
//!
//! The pipeline has two stages. [`training::pretrain`] fits a small MLP
//! encoder and a cosine classifier on a labeled source domain. The adaptation
//! stage ([`training::adapt_uidm`]) then sees only the target domain: a
//! handful of labeled target examples plus an unlabeled pool. Each round it
//! scores the pool with MC-dropout entropy ([`uncertainty`]), keeps the most
//! confident examples of each predicted class as extra trusted data, and
//! trains the encoder on mixup interpolations ([`mixup`]) while the
//! classifier stays frozen.
//!
//! Everything differentiable runs on the small reverse-mode engine in
//! [`tensor`].

pub mod data;
pub mod error;
pub mod mixup;
pub mod model;
pub mod report;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;

/// The generator used for every stochastic step. ChaCha keeps streams
/// identical across platforms and crate versions.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
