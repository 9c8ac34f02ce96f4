//! Network layers: normalization, the residual encoder and the projection head.

mod encoder;
mod head;
mod norm;
mod params;

pub use encoder::{conv_init_bound, linear_init_bound, Encoder, EncoderConfig, StageConfig};
pub use head::{Head, HeadConfig};
pub use norm::{batch_norm, bin, instance_norm, norm_layer, Mode, NormKind, NormSettings, NormState};
pub use params::ParamSet;
