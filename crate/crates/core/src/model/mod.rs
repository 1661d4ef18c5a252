//! Autoencoder, frozen-encoder classifier, training and persistence.

pub mod arch;
pub mod bundle;
pub mod io;
pub mod train;

pub use arch::{Activation, ArchConfig, Architecture, Group, LayerSpec, Mode};
pub use bundle::{predict, HeadOutput, ModelBundle, TrainableFlags};
pub use io::{bundle_from_bytes, bundle_to_bytes, load_bundle, save_bundle, FORMAT_VERSION};
pub use train::{
    add_gaussian_noise, balanced_class_weights, build_classifier, build_default_classifier,
    reconstruction_loss, train_dae, train_supervised, validation_split, LossKind, TrainConfig,
    TrainHistory,
};

#[cfg(test)]
mod tests;
