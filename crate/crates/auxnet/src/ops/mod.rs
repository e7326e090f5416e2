//! The fixed layer zoo: convolution, batch normalization, fully connected,
//! ReLU, global average pooling, and softmax cross-entropy. Every backward
//! kernel here is certified against central finite differences by
//! [`crate::gradcheck`].

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod softmax;

pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_pure, batchnorm_update_running,
    BatchNormCache, BatchNormGrads, BatchNormParams, BnMode,
};
pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_forward_naive, output_dims, Conv2dGrads, Conv2dParams,
};
pub use dense::{
    fc_backward, fc_forward, global_avg_pool_backward, global_avg_pool_forward, relu_backward,
    relu_forward, FcGrads, FcParams,
};
pub use softmax::{softmax_xent_backward, softmax_xent_forward};
