//! Unsupervised image classification by argmax pseudo-labels, a k-means
//! (DeepCluster) baseline, and the tooling to compare them.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod deepcluster;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod uic;

pub use augment::{AugmentPolicy, ImageShape, View};
pub use dataset::{Dataset, LabelAssignment, Split, SynthSpec};
pub use deepcluster::{kmeans, run_deepcluster, DeepClusterConfig};
pub use encoder::{Arch, EncoderConfig, EncoderState};
pub use error::{Error, Result};
pub use parallel::Parallelism;
pub use rng::Rng;
pub use tensor::Tensor;
pub use uic::{run_uic, EpochTrace, TrainingRun, UicConfig};
