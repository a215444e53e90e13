//! A tiny generator/discriminator pair trained with exact gradients against
//! the loss kernels, plus the AdamW optimizer and a binary checkpoint format.

pub mod checkpoint;
mod encoder;
pub mod metrics;
mod optim;
mod tensor;
mod train;

pub use encoder::{sample_corrupt, Cache, ElectraPair, EncoderConfig, Grads, TinyEncoder, N_SECTIONS};
pub use optim::{lr_factor, AdamW, AdamWConfig, Schedule};
pub use tensor::Tensor;
pub use train::{
    mask_example, step_loss, train, Corruption, DumpedExample, EvalRecord, MaskingStrategy, NanDump, SeqExample,
    StepInput, StepLosses, StepOutput, StepRecord, TrainConfig, TrainData, TrainError, TrainOutcome, TrainReport,
};
