//! Desk-scale occupancy task: synthetic box scenes seen from two depth
//! views, a BDC network predicting per-voxel classes, mIoU and ablations.

pub mod ablate;
pub mod metric;
pub mod net;
pub mod scene;
pub mod train;

pub use ablate::{ablate, ablation_jobs, network_cost, run_job, AblationGroup, AblationJob, AblationRow};
pub use metric::{miou, IouCounts, IouReport};
pub use net::{channel_to_height, height_to_channel, infer, predict_labels, NetSpec, Scope, ToyNet};
pub use scene::{generate_scene, Dataset, LabelTensor, SceneConfig, ToyScene};
pub use train::{evaluate, run, train, EvalReport, TrainConfig, TrainReport};
