//! Detection, measurement and mitigation of channel-attention asymmetry in
//! segmentation models fed with stacked adjacent slices ("2D+" inputs).

pub mod bias;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod net;
pub mod report;
pub mod saliency;
pub mod seg_metrics;
pub mod surgery;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{channel_mean, ntf_read, ntf_write, DType, Tensor, TensorData};
