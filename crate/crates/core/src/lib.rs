//! Convolutional classifiers and autoencoders written from first principles,
//! the strategies for carrying a trained representation over to a new task,
//! and the harness that compares those strategies on source/target splits of
//! a labelled dataset.

pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod seed;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::{Activation, LayerSpec, Mode};
pub use model::{Checkpoint, NetworkSpec, ParamAddr, ParamSet, Task};
pub use strategies::{AdaptationStrategy, StrategyKind};
pub use tensor::Tensor;
