//! Desk-scale experiment machinery: synthetic RGB-D scenes, toy networks,
//! training loops and segmentation metrics.

pub mod dataset;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scene;
pub mod train;

pub use dataset::{load_dataset, read_manifest, save_dataset, Dataset, DatasetSpec, Manifest, SplitFiles};
pub use metrics::{segmentation_metrics, Confusion, SegMetrics};
pub use model::{NetKind, Network};
pub use optim::{sgd_step, SgdConfig};
pub use scene::{generate_scene, SyntheticScene};
pub use train::{
    distill_student, distill_with_views, evaluate, hard_label_loss, teacher_views, total_loss, train_teacher,
    DwcConfig, DwcInput, EpochLog, LoopLimits, Method, OmegaMode, StepLog, TeacherView, TrainConfig, TrainOutcome,
};
