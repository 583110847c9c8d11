//! Minimal CPU network engine: NCHW tensors, layers with explicit backward
//! passes, losses and optimizers. Generic over `f32` and `f64`.

mod float;
mod layers;
mod loss;
mod optim;
mod tensor;

pub use float::{matmul, DType, Element, Mat};
pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu, DoubleConv, Layer, MaxPool2, Mode, UpConv2x2};
pub(crate) use layers::join;
pub use loss::{argmax, softmax_nchw, softmax_row, CrossEntropy, Loss, PixelLogits};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd};
pub use tensor::{Param, ParamKind, Tensor};
