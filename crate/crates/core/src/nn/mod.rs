//! Small neural-network engine: dense, 3x3 convolution, 2x2 max-pooling,
//! global average pooling and activations, trained with plain minibatch SGD
//! on binary cross-entropy over two sigmoid outputs.

mod checkpoint;
mod gradcheck;
mod layer;
mod metrics;
mod network;
mod tensor;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, MAGIC as CHECKPOINT_MAGIC,
};
pub use gradcheck::{
    gradient_check, random_batch, random_network, relative_error, GradCheck, RELATIVE_ERROR_FLOOR,
};
pub use layer::{sigmoid, softplus, Activation, Layer, LayerKind};
pub use metrics::{evaluate, metrics_from_predictions, Confusion, Metrics};
pub use network::{bce_from_logits, Network, NetworkBuilder, Sample, WeightedSample};
pub use tensor::Tensor;
pub use train::{
    best_epoch, history_csv, lr_sweep, train, EpochRecord, PreparedSet, SweepResult, SweepRow,
    TrainOutcome, TrainingConfig, HISTORY_CSV_HEADER,
};
