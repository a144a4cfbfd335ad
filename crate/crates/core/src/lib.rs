//! Occlusion-guided temporal 3D pose lifting with an occlusion benchmark
//! harness: skeletons and sequence files, occlusion masks, a dilated temporal
//! convolution lifter with hand-written gradients, training, MPJPE metrics,
//! synthetic motion data and a downstream action-classification probe.

pub mod dataset;
pub mod error;
pub mod lifter;
pub mod metrics;
pub mod occlusion;
pub mod optim;
pub mod quality;
pub mod rng;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use dataset::{load_dataset, save_dataset, Dataset, PairedSequence, Split};
pub use error::{Error, Result};
pub use lifter::{
    load_checkpoint, parameter_count, receptive_field, save_checkpoint, LifterConfig, LifterModel, PosePredictor,
};
pub use metrics::{evaluate, masked_predictions, mpjpe, EvalReport, Protocol, ReportTable};
pub use occlusion::{apply_guidance, GuidedWindow, MaskSpec, OcclusionMask, OcclusionScheme};
pub use quality::{encode, normalize_frame, train_classifier, Classifier, EncodedSample};
pub use rng::SplitMix64;
pub use skeleton::{get_topology, load_sequence, save_sequence, PoseSequence, SkeletonTopology};
pub use synth::{make_dataset, ActionSpec, Camera};
pub use tensor::{Mode, Scalar, Tensor};
pub use trainer::{fit, Augmentation, EpochLog, TrainConfig};
