//! The variant matrix (full model, single-task pretexts, from-scratch) and
//! the pretrain-fraction sweep, both on generated phantom data.

use super::eval::{eval_pretext, repeated_split_eval};
use super::loops::pretrain;
use super::{derive_seed, Result, RunConfig, Sample};
use crate::augment::AugmentConfig;
use crate::io::checkpoint::NamedTensors;
use crate::metrics::{MetricSummary, MetricsReport, ReconConfig};
use crate::model::{ModelConfig, PretextTasks};
use crate::phantom::{generate_dataset, PhantomSpec};
use crate::train::data::from_phantoms;

const STREAM_PRETEXT_DATA: u64 = 60;
const STREAM_TARGET_DATA: u64 = 61;
const STREAM_HOLDOUT_DATA: u64 = 62;
const STREAM_VARIANT: u64 = 63;
const STREAM_SWEEP: u64 = 64;

/// The four training regimes compared in the task ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Pretrained encoder from both pretext tasks, frozen for fine-tuning.
    Bapm,
    /// Reconstruction-only pretext.
    BapmR,
    /// Segmentation-only pretext.
    BapmS,
    /// No pretraining; the downstream model trains from scratch.
    BapmB,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Bapm, Variant::BapmR, Variant::BapmS, Variant::BapmB];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bapm => "bapm",
            Variant::BapmR => "bapm_r",
            Variant::BapmS => "bapm_s",
            Variant::BapmB => "bapm_b",
        }
    }

    pub fn tasks(self) -> Option<PretextTasks> {
        match self {
            Variant::Bapm => Some(PretextTasks::Both),
            Variant::BapmR => Some(PretextTasks::RecOnly),
            Variant::BapmS => Some(PretextTasks::SegOnly),
            Variant::BapmB => None,
        }
    }
}

/// Desk-scale sizes for the ablation experiments.
#[derive(Debug, Clone)]
pub struct AblateConfig {
    pub pretext_per_class: usize,
    pub pretext_epochs: usize,
    pub target_per_class: usize,
    pub finetune_epochs: usize,
    pub repeats: usize,
    pub fractions: Vec<f64>,
    pub sweep_seeds: usize,
    pub sweep_epochs: usize,
    pub holdout_per_class: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            pretext_per_class: 50,
            pretext_epochs: 8,
            target_per_class: 30,
            finetune_epochs: 12,
            repeats: 5,
            fractions: vec![0.2, 0.6, 1.0],
            sweep_seeds: 3,
            sweep_epochs: 6,
            holdout_per_class: 10,
        }
    }
}

/// Extracts the transfer set from a trained pretext model.
pub fn encoder_tensors(model: &crate::model::Model) -> NamedTensors {
    let mut out = NamedTensors::new();
    for e in model.params.entries() {
        if e.name.starts_with("encoder.") {
            out.push(&e.name, e.shape.clone(), e.data.clone())
                .expect("unique names");
        }
    }
    out
}

/// Runs all four variants on one shared phantom task and reports the
/// classification metrics of each.
pub fn run_task_matrix(
    phantom: &PhantomSpec,
    model_cfg: ModelConfig,
    aug: &AugmentConfig,
    run: &RunConfig,
    ablate: &AblateConfig,
) -> Result<Vec<(Variant, MetricsReport)>> {
    let pretext_data = from_phantoms(generate_dataset(
        ablate.pretext_per_class,
        phantom,
        derive_seed(run.seed, STREAM_PRETEXT_DATA, 0),
    )?);
    let target_data = from_phantoms(generate_dataset(
        ablate.target_per_class,
        phantom,
        derive_seed(run.seed, STREAM_TARGET_DATA, 0),
    )?);

    let mut results = Vec::new();
    for (vi, variant) in Variant::ALL.into_iter().enumerate() {
        let encoder = match variant.tasks() {
            Some(tasks) => {
                let mut pre_run = run.clone();
                pre_run.tasks = tasks;
                pre_run.pretext_epochs = ablate.pretext_epochs;
                pre_run.seed = derive_seed(run.seed, STREAM_VARIANT, vi as u64);
                let out = pretrain(&pretext_data, &pre_run, model_cfg, aug)?;
                Some(encoder_tensors(&out.model))
            }
            None => None,
        };
        let mut ft_run = run.clone();
        ft_run.finetune_epochs = ablate.finetune_epochs;
        ft_run.repeats = ablate.repeats;
        ft_run.pretrained = encoder.is_some();
        let report =
            repeated_split_eval(&target_data, encoder.as_ref(), &ft_run, model_cfg, aug)?;
        results.push((variant, report));
    }
    Ok(results)
}

/// Held-out soft Dice of pretext models trained on growing fractions of the
/// source set, several seeds per fraction.
#[derive(Debug, Clone)]
pub struct FractionPoint {
    pub fraction: f64,
    pub soft_dice: MetricSummary,
    pub ssim: MetricSummary,
}

pub fn run_fraction_sweep(
    phantom: &PhantomSpec,
    model_cfg: ModelConfig,
    aug: &AugmentConfig,
    run: &RunConfig,
    ablate: &AblateConfig,
) -> Result<Vec<FractionPoint>> {
    let data = from_phantoms(generate_dataset(
        ablate.pretext_per_class,
        phantom,
        derive_seed(run.seed, STREAM_PRETEXT_DATA, 1),
    )?);
    let holdout: Vec<Sample> = from_phantoms(generate_dataset(
        ablate.holdout_per_class,
        phantom,
        derive_seed(run.seed, STREAM_HOLDOUT_DATA, 0),
    )?);
    let recon_cfg = ReconConfig::default();
    let mut out = Vec::new();
    for &fraction in &ablate.fractions {
        let mut dice_vals = Vec::new();
        let mut ssim_vals = Vec::new();
        for s in 0..ablate.sweep_seeds {
            let mut sweep_run = run.clone();
            sweep_run.tasks = PretextTasks::Both;
            sweep_run.pretrain_fraction = fraction;
            sweep_run.pretext_epochs = ablate.sweep_epochs;
            sweep_run.seed = derive_seed(run.seed, STREAM_SWEEP, (s * 1000) as u64 + (fraction * 100.0) as u64);
            let trained = pretrain(&data, &sweep_run, model_cfg, aug)?;
            let eval = eval_pretext(&trained.model, PretextTasks::Both, &holdout, &recon_cfg)?;
            dice_vals.push(eval.soft_dice);
            ssim_vals.push(eval.ssim);
        }
        out.push(FractionPoint {
            fraction,
            soft_dice: crate::metrics::summarize("soft_dice", &dice_vals),
            ssim: crate::metrics::summarize("ssim", &ssim_vals),
        });
    }
    Ok(out)
}

/// One combined CSV over both experiments:
/// `experiment,variant,metric,mean,std`.
pub fn ablation_csv(
    matrix: &[(Variant, MetricsReport)],
    sweep: &[FractionPoint],
) -> String {
    let mut out = String::from("experiment,variant,metric,mean,std\n");
    for (variant, report) in matrix {
        for row in &report.rows {
            out.push_str(&format!(
                "task_matrix,{},{},{:.6},{:.6}\n",
                variant.name(),
                row.metric,
                row.mean,
                row.std
            ));
        }
    }
    for point in sweep {
        for row in [&point.soft_dice, &point.ssim] {
            out.push_str(&format!(
                "fraction_sweep,{},{},{:.6},{:.6}\n",
                point.fraction, row.metric, row.mean, row.std
            ));
        }
    }
    out
}
