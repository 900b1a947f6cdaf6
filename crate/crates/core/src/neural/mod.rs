//! Small convolutional networks with a reverse-mode autodiff tape.

pub mod checkpoint;
mod conv;
pub mod model;
pub mod optim;
pub mod svm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use model::{
    batch_tensor, softmax_channels, Architecture, Backward, DetectorSpec, ModelParams, ParamVars, SegmenterSpec,
    CLASSES,
};
pub use optim::{clip_grad_norm, sgd_step, sgd_update, Sgd};
pub use svm::{mfcc_svm_train, LinearSvm, Standardizer, SvmConfig};
pub use tape::{Conv2d, Grads, Tape, Var};
pub use tensor::{Real, Tensor};
pub use train::{fit, train_classifier, BatchOutput, CrossEntropy, EpochRecord, History, Objective, TrainConfig};
