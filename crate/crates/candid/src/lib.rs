//! Burst image denoising: a small differentiable tensor core, synthetic
//! noisy-burst generation, single-frame pre-denoising streams, pyramidal
//! dense flow alignment, a kernel-predicting fusion network and the training
//! / evaluation pipeline around them.

pub mod checkpoint;
pub mod flow;
pub mod imaging;
pub mod net;
pub mod noise;
pub mod pipeline;
pub mod prefilter;
pub mod tensor;
pub mod util;

pub use imaging::Image;
pub use net::{Model, NetConfig};
pub use pipeline::TrainConfig;
pub use tensor::Tensor;
