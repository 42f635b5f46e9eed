//! Trainable layers and the image kernels they are built from.

mod cost;
mod ctx;
pub mod functional;
mod layers;
mod param;

pub use cost::OpCount;
pub use ctx::{Ctx, Mode, StatUpdate, Trace};
pub use functional::{
    batch_norm_eval, batch_norm_train, conv2d, conv_out_len, max_pool2d, upsample2x,
    BatchNormOutput, UpsampleMode,
};
pub use layers::{BatchNorm2d, Conv2d, Dense, BN_EPS, BN_MOMENTUM};
pub use param::{init_rng, Module, Param};

#[cfg(test)]
mod tests;
