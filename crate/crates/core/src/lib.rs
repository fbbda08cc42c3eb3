//! Toy-scale two-stage pedestrian detector with full-stage proposal
//! refinement: negative reselection during training, classifier-guided
//! proposal filtering and split-proposal confidence gating at inference,
//! plus a synthetic benchmark and miss-rate/FPPI evaluation.

pub mod classifier;
pub mod container;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod refinement;

pub use classifier::{ClassifierWeights, LabeledPatch, LayerSpec, Patch};
pub use dataset::AnnotatedImage;
pub use detector::{Detection, DetectorWeights, InferenceMode};
pub use error::{FrpError, Result};
pub use geometry::BoundingBox;
pub use imaging::Image;
pub use refinement::{FrpThresholds, Proposal, ProposalScorer, SfrpScores};
