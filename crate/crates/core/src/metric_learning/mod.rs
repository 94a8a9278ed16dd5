//! Sub-center ArcFace metric learning: head, adaptive margins, learning-rate
//! schedules and a small deterministic trainer.

pub mod arcface;
pub mod margins;
pub mod schedule;
pub mod trainer;

pub use arcface::{
    arcface_forward, arcface_gradients, arcface_loss, subcenter_cosines, subcenter_cosines_matrix, ArcFaceGradients,
    ArcFaceHead, PooledCosines,
};
pub use margins::adaptive_margins;
pub use schedule::{layerwise_lr, lr_at_step, LrSchedule};
pub use trainer::{embed_with_checkpoint, train_toy, ToyDataset, ToyTrainConfig, ToyTrainOutput};
