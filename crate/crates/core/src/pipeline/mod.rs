//! Training, inference and evaluation of the full estimator.

pub mod ablation;
pub mod evaluate;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod predict;
pub mod train;

pub use ablation::{run_ablation, AblationReport, AblationRow, Toggle};
pub use gradcheck::{gradient_suite, SuiteDims, SuiteEntry};
pub use evaluate::{evaluate, predict_all, THREADS_ENV};
pub use loss::{analytic_shifts, joint_shift_loss, shift_matrix, total_loss, LossTerms, LossValues};
pub use model::{EpochLog, Heads, Model, TrainState, MM_PER_UNIT};
pub use predict::{assemble, predict_video, StreamingPredictor, VideoPrediction};
pub use train::{batch_losses, draw_batch, train, train_step, PreparedVideo, TrainOptions};
