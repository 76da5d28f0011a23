//! Scale-aware feature correction for multi-scale object detection.
//!
//! The crate contains a small dense tensor engine with reverse-mode
//! differentiation, a miniature convolutional detector built on it, the
//! scale-aware sub-network module (per-scale-partition 1×1 channel
//! mixing trained against features of scale-normalized patches), a
//! synthetic multi-scale dataset, and the measurement tools used to show
//! that the correction reduces feature variation across scales.

pub mod analysis;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod detector;
pub mod error;
pub mod head;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod roi;
pub mod san;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use backbone::{Backbone, Image};
pub use error::{Error, Result};
pub use kernels::{PadMode, PoolMode};
pub use roi::RoI;
pub use san::{partition_index, SanModule, ScalePartitionScheme};
pub use tensor::{Parameter, Scalar, Tensor};
