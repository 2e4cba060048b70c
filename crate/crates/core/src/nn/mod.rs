//! Deterministic f64 forward/backward runtime for small CNNs.

pub mod conv;
pub mod data;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod train;

pub use data::{Batch, Dataset, Pixels};
pub use layers::{conv_forward, softmax, tucker2_conv_forward, FeatureTap, Layer};
pub use loss::{approach_loss, cross_entropy, weight_loss};
pub use network::{BackwardOptions, ForwardPass, Gradients, Network, Route};
pub use optim::{sgd_step, LrSchedule, OptimizerState, SgdConfig};
