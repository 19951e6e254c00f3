//! Loss, optimizer, split protocols and the training loop.

mod adam;
mod loss;
mod split;
mod trainer;

pub use adam::{adam_step, adam_update, AdamState};
pub use loss::{bce_loss, PROB_CLAMP};
pub use split::{split_loso, split_subject_dependent, Protocol, SplitPlan};
pub use trainer::{
    batch_tensor, evaluate, predict_labels, train_loop, EarlyStopping, EpochRecord, TrainConfig, TrainOutcome,
    Verdict,
};
