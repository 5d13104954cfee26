//! Dual encoders, contrastive objectives and training.

pub mod checkpoint;
pub mod encoders;
pub mod losses;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use encoders::{
    embed_logic_batch, embed_traffic_batch, encode_logic_embed, encode_traffic_embed, grad_x_input,
    ModalityInput,
};
pub use losses::{consistency, info_nce, supcon};
pub use params::{ModelConfig, ModelParams, ParamStore};
pub use tensor::Tensor;
pub use train::{
    combined_loss, train, Batch, EncodedPair, EpochStats, LabeledTrace, LossParts, TrainConfig,
    TrainOutcome, TrainSet,
};
