//! Training loops, replication-accuracy evaluation, comparisons and the
//! attention sweep.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod train;

pub use checkpoint::{Checkpoint, Model};
pub use compare::{compare, Comparison, VolumeBands};
pub use config::{CheckpointPolicy, ExperimentConfig, ModelKind};
pub use eval::{auc, evaluate, replication_accuracy, EvalReport};
pub use experiment::{four_way, sweep, Datasets, FourWay, Run, Sweep};
pub use train::{train_backbone, train_slice_aware, TrainReport};
