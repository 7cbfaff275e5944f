//! Peak Suppression and Gaussian-blur adversarial attacks on small
//! classifiers, built on a self-contained reverse-mode tensor engine.

pub mod attack;
pub mod blur;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod harness;
pub mod manifold;
pub mod network;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attack::{AttackConfig, AttackMode, AttackResult, SigmaGradient};
pub use blur::GaussianKernel;
pub use data::{Dataset, DatasetKind, DatasetSpec, LabeledSample};
pub use error::{Error, Result};
pub use network::{evaluate, Network};
pub use tape::{Axes, GradientBundle, ParamId, Tape, Var};
pub use tensor::{PaddingMode, Tensor};
pub use train::{TrainConfig, TrainReport};
