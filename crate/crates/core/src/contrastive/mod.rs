//! Momentum-contrastive pretraining: InfoNCE over a FIFO queue of target
//! embeddings, SGD on the online networks, momentum update of the target.

mod loss;
mod momentum;
mod queue;
mod sgd;
mod trainer;

pub use loss::{info_nce, info_nce_batch};
pub use momentum::momentum_update;
pub use queue::EmbeddingQueue;
pub use sgd::Sgd;
pub use trainer::{
    batch_indices, encoder_checkpoint, encoder_from_checkpoint, pretrain, write_loss_csv, write_loss_row, DualEncoderState, LrSchedule,
    StepRecord, TrainConfig, TrainError, Trainer,
};
