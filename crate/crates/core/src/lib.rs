//! Multi-objective CNN for robot-arm perception: synthetic ground truth,
//! a small reverse-mode tensor toolkit, the network with its transfer
//! mechanics, training and evaluation.

pub mod autodiff;
pub mod datastore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod robots;
pub mod synth;
pub mod train;

pub use autodiff::{LrSchedule, Parameter, Sgd, Tensor};
pub use datastore::{Batch, Corpus, Dataset, DatasetManifest, SampleRecord, SplitTag};
pub use error::{Error, Result};
pub use geometry::{KinematicChain, PinholeCamera, RigidTransform, Vec3};
pub use loss::{LossBreakdown, LossWeights};
pub use model::{ArchitectureSpec, MultiObjectiveNet};
pub use robots::{Robot, RobotModel};
pub use synth::{Sample, SceneConfig};
pub use train::{train_full, train_transfer, TrainConfig, TrainLog, TrainOutcome};
