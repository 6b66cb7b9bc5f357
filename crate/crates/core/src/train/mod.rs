//! Training: pretext and fine-tune loops, loss plumbing, the repeated-split
//! evaluation harness, and the ablation matrix.

pub mod ablation;
pub mod data;
pub mod eval;
pub mod loops;
pub mod losses;

pub use ablation::{ablation_csv, run_fraction_sweep, run_task_matrix, AblateConfig, Variant};
pub use data::{load_dataset, write_dataset, DataError, Sample};
pub use eval::{eval_pretext, predict, repeated_split_eval, stratified_split, PretextEval};
pub use loops::{finetune, pretrain, TrainOutput};
pub use losses::{one_hot, pretext_loss, PretextLoss};

use thiserror::Error;

use crate::augment::AugmentError;
use crate::metrics::MetricsError;
use crate::model::{ModelError, PretextTasks};
use crate::phantom::PhantomError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset too small: need at least {needed} samples, found {found}")]
    DatasetTooSmall { needed: usize, found: usize },
    #[error("sample {id} has no tissue labels but the segmentation task needs them")]
    MissingLabels { id: String },
    #[error("sample {id} has no class label but fine-tuning needs one")]
    MissingClass { id: String },
    #[error("class {class} has only {count} samples; stratified splitting needs at least 2")]
    ClassTooSmall { class: u8, count: usize },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretext,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretext => "pretext",
            Stage::Finetune => "finetune",
        }
    }
}

/// Hyperparameters of a full run: the pretext stage, the fine-tune stage,
/// and the repeated-split evaluation protocol.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub stage: Stage,
    /// Together with `pretrained` this encodes the variant matrix: both +
    /// pretrained is the full model, rec/seg only are the single-task
    /// ablations, and pretrained = false trains from scratch.
    pub tasks: PretextTasks,
    pub pretrained: bool,
    pub pretrain_fraction: f64,
    pub augment: bool,
    pub pretext_batch: usize,
    pub finetune_batch: usize,
    pub pretext_lr: f64,
    pub finetune_lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub pretext_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::Pretext,
            tasks: PretextTasks::Both,
            pretrained: true,
            pretrain_fraction: 1.0,
            augment: true,
            pretext_batch: 4,
            finetune_batch: 2,
            pretext_lr: 1e-4,
            finetune_lr: 1e-4,
            decay_every: 30,
            decay_factor: 0.1,
            pretext_epochs: 30,
            finetune_epochs: 90,
            seed: 0,
            train_fraction: 0.8,
            repeats: 5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pretrain_fraction", self.pretrain_fraction),
            ("train_fraction", self.train_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(TrainError::Config(format!("{name} {v} outside (0, 1]")));
            }
        }
        if self.repeats < 1 {
            return Err(TrainError::Config("repeats must be at least 1".into()));
        }
        if self.pretext_batch == 0 || self.finetune_batch == 0 {
            return Err(TrainError::Config("batch sizes must be positive".into()));
        }
        if self.pretext_epochs == 0 || self.finetune_epochs == 0 {
            return Err(TrainError::Config("epoch counts must be positive".into()));
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Debug, Clone)]
pub struct LossRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub l_rec: Option<f64>,
    pub l_seg: Option<f64>,
    pub l_total: Option<f64>,
    pub l_ce: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// `stage,epoch,step,l_rec,l_seg,l_total`; absent task terms stay empty.
pub fn pretext_trace_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("stage,epoch,step,l_rec,l_seg,l_total\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.stage.as_str(),
            r.epoch,
            r.step,
            opt(r.l_rec),
            opt(r.l_seg),
            opt(r.l_total)
        ));
    }
    out
}

/// `stage,epoch,step,l_ce`.
pub fn finetune_trace_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("stage,epoch,step,l_ce\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.stage.as_str(),
            r.epoch,
            r.step,
            opt(r.l_ce)
        ));
    }
    out
}

/// Splitmix-style seed derivation for independent substreams.
pub(crate) fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xD1B54A32D192ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
