//! Hyperbolic speech-emotion domain adaptation: Poincaré-ball geometry,
//! a small reverse-mode tape, the quantize/fuse/calibrate/pool network,
//! prototype transport and the training loop around them.

pub mod autodiff;
pub mod ball;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod net;
pub mod ot;
pub mod proto;
pub mod train;
pub mod vq;

pub use ball::{BallConfig, Geometry};
pub use checkpoint::Checkpoint;
pub use data::{LabelSpace, Utterance};
pub use error::{Error, Result};
pub use net::ablation::{AblationConfig, AblationPreset, Branch, Fusion};
pub use net::{Model, ModelConfig, ModelParams, Prediction};
pub use train::{EpochReport, TrainConfig};
