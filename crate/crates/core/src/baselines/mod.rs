//! Comparison models: handcrafted-feature linear SVM and a 3D CNN.

mod cnn3d;
mod features;
mod svm;

pub use cnn3d::{Cnn3d, Cnn3dConfig};
pub use features::{extract_features, FEATURES_PER_CHANNEL};
pub use svm::{LinearSvm, SvmConfig, Standardizer};
