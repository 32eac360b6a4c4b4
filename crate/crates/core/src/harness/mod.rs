//! Data, training, evaluation, checkpoints and the ablation runner.

mod ablation;
mod checkpoint;
mod dataset;
mod io;
mod settings;
mod synth;
mod train;

pub use ablation::{run_ablation, AblationReport, AblationRow, Arm, ARMS};
pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, checksum, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use dataset::{load_dataset, pixel, sample_calibration, Dataset, Split, DATASET_MAGIC, DATASET_VERSION};
pub use settings::Settings;
pub use synth::{bundled, synthetic, SYNTH_CLASSES, TEST_RECORDS, TRAIN_RECORDS};
pub use train::{argmax, evaluate_top1, predict, train_toy_fp, TrainConfig};
