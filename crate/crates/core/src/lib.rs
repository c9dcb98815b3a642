//! Spectral-spatial hyperspectral image classification.
//!
//! A small fully connected network is trained on pixel spectra under joint
//! softmax and center-loss supervision ([`train`]). At test time every pixel
//! is mapped to its feature vector and labeled by the nearest class center,
//! either from its own feature or from neighborhood averages voted across
//! several window sizes ([`classify`]).

mod binio;
pub mod classify;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nncore;
pub mod train;

pub use classify::{
    asscc_classify, classify_image, estimate_centers, extract_feature_map, scc_classify, spatial_feature,
    ClassifierMode, EstimatedCenters, FeatureMap, PredictionMap, ScaleSet, VoteBreakdown,
};
pub use data::{GroundTruth, HyperCube, Role, SplitMask};
pub use error::{Error, Result};
pub use losses::{JointLossReport, RunningCenters};
pub use metrics::{confusion, oa_aa_kappa, ConfusionMatrix, Scores};
pub use nncore::{init_network, Batch, Mode, Network};
pub use train::{
    lr_at, make_virtual_samples, normalize_cube, split_train_test, train_model, SampleSet, TrainConfig, TrainingTrace,
};
