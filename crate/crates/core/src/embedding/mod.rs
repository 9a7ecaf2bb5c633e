//! Embedding space for clustering: an autoencoder trained on the inputs, or
//! vectors imported from elsewhere.

mod autoencoder;
mod matrix;

pub use autoencoder::{embed, train_autoencoder, Autoencoder, AutoencoderConfig, AutoencoderKind, TrainedAutoencoder};
pub use matrix::{import_embeddings, EmbeddingMatrix, EmbeddingSource};
