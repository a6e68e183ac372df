//! Dense tensors, reverse-mode differentiation, convolution layers, Glorot
//! initialization and Adam.

mod autograd;
mod conv;
mod gradcheck;
mod init;
mod layers;
mod optim;
mod tensor;

pub use autograd::{BatchStats, Tape, Var};
pub use conv::ConvGeometry;
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, FD_STEP};
pub use init::{glorot_init, glorot_std, glorot_uniform};
pub use layers::{
    batch_norm, conv2d, conv_transpose2d, leaky_relu, tanh_activation, BatchNormLayer, ConvKind,
    ConvLayer, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE,
};
pub use optim::{AdamConfig, AdamState};
pub use tensor::{
    decode_container, load_tensor, read_container, save_tensor, write_container, DType, Tensor,
};
