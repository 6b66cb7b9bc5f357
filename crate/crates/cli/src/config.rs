//! Flat `key = value` run configuration. One key per line, `#` comments,
//! dotted keys namespaced per module, unknown keys are hard errors, and every
//! run logs its fully resolved key set.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use bapm_core::augment::AugmentConfig;
use bapm_core::metrics::ReconConfig;
use bapm_core::model::{ModelConfig, PretextTasks};
use bapm_core::phantom::PhantomSpec;
use bapm_core::train::{AblateConfig, RunConfig};

#[derive(Debug, Clone)]
pub struct Config {
    pub model: ModelConfig,
    pub phantom: PhantomSpec,
    pub augment: AugmentConfig,
    pub run: RunConfig,
    pub recon: ReconConfig,
    pub hd_percentile: f64,
    pub ablate: AblateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            phantom: PhantomSpec::default(),
            augment: AugmentConfig::default(),
            run: RunConfig::default(),
            recon: ReconConfig::default(),
            hd_percentile: 100.0,
            ablate: AblateConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| anyhow!("config key {key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => bail!("config key {key}: expected true/false, got {other:?}"),
    }
}

fn tasks_name(tasks: PretextTasks) -> &'static str {
    match tasks {
        PretextTasks::Both => "both",
        PretextTasks::RecOnly => "rec_only",
        PretextTasks::SegOnly => "seg_only",
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let mut cfg = Config::default();
        let text = std::fs::read_to_string(path.as_ref())
            .with_context(|| format!("reading config {}", path.as_ref().display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {}: expected key = value, got {raw:?}", i + 1);
            };
            cfg.apply(key.trim(), value.trim())
                .with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(cfg)
    }

    /// Applies one `--set key=value` style override.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let Some((key, value)) = spec.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {spec:?}");
        };
        self.apply(key.trim(), value.trim())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.run.seed = parse(key, value)?,
            "model.width_factor" => self.model.width_factor = parse(key, value)?,
            "model.num_classes" => self.model.num_classes = parse(key, value)?,
            "model.norm_eps" => self.model.norm_eps = parse(key, value)?,
            "phantom.dim" => {
                let d: usize = parse(key, value)?;
                self.phantom.dims = [d, d, d];
            }
            "phantom.delta" => self.phantom.atrophy_delta = parse(key, value)?,
            "phantom.gm_thickness" => self.phantom.gm_thickness = parse(key, value)?,
            "phantom.deform_amplitude" => self.phantom.deform_amplitude = parse(key, value)?,
            "phantom.jitter" => self.phantom.jitter = parse(key, value)?,
            "phantom.noise_std" => {
                let s: f32 = parse(key, value)?;
                for c in 1..4 {
                    self.phantom.intensity_stds[c] = s;
                }
            }
            "augment.affine.enabled" => self.augment.affine.enabled = parse_bool(key, value)?,
            "augment.affine.prob" => self.augment.affine.prob = parse(key, value)?,
            "augment.affine.rotation_deg" => self.augment.rotation_deg = parse(key, value)?,
            "augment.affine.scale_min" => self.augment.scale_range.0 = parse(key, value)?,
            "augment.affine.scale_max" => self.augment.scale_range.1 = parse(key, value)?,
            "augment.affine.translation_vox" => self.augment.translation_vox = parse(key, value)?,
            "augment.blur.enabled" => self.augment.blur.enabled = parse_bool(key, value)?,
            "augment.blur.prob" => self.augment.blur.prob = parse(key, value)?,
            "augment.blur.sigma_min" => self.augment.blur_sigma_range.0 = parse(key, value)?,
            "augment.blur.sigma_max" => self.augment.blur_sigma_range.1 = parse(key, value)?,
            "augment.noise.enabled" => self.augment.noise.enabled = parse_bool(key, value)?,
            "augment.noise.prob" => self.augment.noise.prob = parse(key, value)?,
            "augment.noise.sigma_min" => self.augment.noise_sigma_range.0 = parse(key, value)?,
            "augment.noise.sigma_max" => self.augment.noise_sigma_range.1 = parse(key, value)?,
            "augment.bias.enabled" => self.augment.bias.enabled = parse_bool(key, value)?,
            "augment.bias.prob" => self.augment.bias.prob = parse(key, value)?,
            "augment.bias.order" => self.augment.bias_order = parse(key, value)?,
            "augment.bias.coeff_range" => self.augment.bias_coeff_range = parse(key, value)?,
            "augment.motion.enabled" => self.augment.motion.enabled = parse_bool(key, value)?,
            "augment.motion.prob" => self.augment.motion.prob = parse(key, value)?,
            "augment.motion.movements_min" => self.augment.motion_movements.0 = parse(key, value)?,
            "augment.motion.movements_max" => self.augment.motion_movements.1 = parse(key, value)?,
            "augment.motion.rotation_deg" => self.augment.motion_rotation_deg = parse(key, value)?,
            "augment.motion.translation_vox" => {
                self.augment.motion_translation_vox = parse(key, value)?
            }
            "train.tasks" => {
                self.run.tasks = match value {
                    "both" => PretextTasks::Both,
                    "rec_only" => PretextTasks::RecOnly,
                    "seg_only" => PretextTasks::SegOnly,
                    other => bail!("config key {key}: expected both/rec_only/seg_only, got {other:?}"),
                }
            }
            "train.pretrained" => self.run.pretrained = parse_bool(key, value)?,
            "train.pretrain_fraction" => self.run.pretrain_fraction = parse(key, value)?,
            "train.augment" => self.run.augment = parse_bool(key, value)?,
            "train.pretext.epochs" => self.run.pretext_epochs = parse(key, value)?,
            "train.pretext.batch" => self.run.pretext_batch = parse(key, value)?,
            "train.pretext.lr" => self.run.pretext_lr = parse(key, value)?,
            "train.finetune.epochs" => self.run.finetune_epochs = parse(key, value)?,
            "train.finetune.batch" => self.run.finetune_batch = parse(key, value)?,
            "train.finetune.lr" => self.run.finetune_lr = parse(key, value)?,
            "train.finetune.decay_every" => self.run.decay_every = parse(key, value)?,
            "train.finetune.decay_factor" => self.run.decay_factor = parse(key, value)?,
            "eval.train_fraction" => self.run.train_fraction = parse(key, value)?,
            "eval.repeats" => self.run.repeats = parse(key, value)?,
            "metrics.bins" => self.recon.bins = parse(key, value)?,
            "metrics.ssim_window" => self.recon.ssim_window = parse(key, value)?,
            "metrics.hd_percentile" => self.hd_percentile = parse(key, value)?,
            "ablate.pretext_per_class" => self.ablate.pretext_per_class = parse(key, value)?,
            "ablate.pretext_epochs" => self.ablate.pretext_epochs = parse(key, value)?,
            "ablate.target_per_class" => self.ablate.target_per_class = parse(key, value)?,
            "ablate.finetune_epochs" => self.ablate.finetune_epochs = parse(key, value)?,
            "ablate.repeats" => self.ablate.repeats = parse(key, value)?,
            "ablate.fractions" => {
                let parts: Result<Vec<f64>> = value
                    .split(',')
                    .map(|p| parse("ablate.fractions", p))
                    .collect();
                self.ablate.fractions = parts?;
            }
            "ablate.sweep_seeds" => self.ablate.sweep_seeds = parse(key, value)?,
            "ablate.sweep_epochs" => self.ablate.sweep_epochs = parse(key, value)?,
            "ablate.holdout_per_class" => self.ablate.holdout_per_class = parse(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Every key with its current value, sorted; the resolved-run log.
    pub fn resolved_lines(&self) -> Vec<String> {
        let fractions = self
            .ablate
            .fractions
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut lines = vec![
            format!("seed = {}", self.run.seed),
            format!("model.width_factor = {}", self.model.width_factor),
            format!("model.num_classes = {}", self.model.num_classes),
            format!("model.norm_eps = {}", self.model.norm_eps),
            format!("phantom.dim = {}", self.phantom.dims[0]),
            format!("phantom.delta = {}", self.phantom.atrophy_delta),
            format!("phantom.gm_thickness = {}", self.phantom.gm_thickness),
            format!("phantom.deform_amplitude = {}", self.phantom.deform_amplitude),
            format!("phantom.jitter = {}", self.phantom.jitter),
            format!("phantom.noise_std = {}", self.phantom.intensity_stds[1]),
            format!("augment.affine.enabled = {}", self.augment.affine.enabled),
            format!("augment.affine.prob = {}", self.augment.affine.prob),
            format!("augment.affine.rotation_deg = {}", self.augment.rotation_deg),
            format!("augment.affine.scale_min = {}", self.augment.scale_range.0),
            format!("augment.affine.scale_max = {}", self.augment.scale_range.1),
            format!("augment.affine.translation_vox = {}", self.augment.translation_vox),
            format!("augment.blur.enabled = {}", self.augment.blur.enabled),
            format!("augment.blur.prob = {}", self.augment.blur.prob),
            format!("augment.blur.sigma_min = {}", self.augment.blur_sigma_range.0),
            format!("augment.blur.sigma_max = {}", self.augment.blur_sigma_range.1),
            format!("augment.noise.enabled = {}", self.augment.noise.enabled),
            format!("augment.noise.prob = {}", self.augment.noise.prob),
            format!("augment.noise.sigma_min = {}", self.augment.noise_sigma_range.0),
            format!("augment.noise.sigma_max = {}", self.augment.noise_sigma_range.1),
            format!("augment.bias.enabled = {}", self.augment.bias.enabled),
            format!("augment.bias.prob = {}", self.augment.bias.prob),
            format!("augment.bias.order = {}", self.augment.bias_order),
            format!("augment.bias.coeff_range = {}", self.augment.bias_coeff_range),
            format!("augment.motion.enabled = {}", self.augment.motion.enabled),
            format!("augment.motion.prob = {}", self.augment.motion.prob),
            format!("augment.motion.movements_min = {}", self.augment.motion_movements.0),
            format!("augment.motion.movements_max = {}", self.augment.motion_movements.1),
            format!("augment.motion.rotation_deg = {}", self.augment.motion_rotation_deg),
            format!("augment.motion.translation_vox = {}", self.augment.motion_translation_vox),
            format!("train.tasks = {}", tasks_name(self.run.tasks)),
            format!("train.pretrained = {}", self.run.pretrained),
            format!("train.pretrain_fraction = {}", self.run.pretrain_fraction),
            format!("train.augment = {}", self.run.augment),
            format!("train.pretext.epochs = {}", self.run.pretext_epochs),
            format!("train.pretext.batch = {}", self.run.pretext_batch),
            format!("train.pretext.lr = {}", self.run.pretext_lr),
            format!("train.finetune.epochs = {}", self.run.finetune_epochs),
            format!("train.finetune.batch = {}", self.run.finetune_batch),
            format!("train.finetune.lr = {}", self.run.finetune_lr),
            format!("train.finetune.decay_every = {}", self.run.decay_every),
            format!("train.finetune.decay_factor = {}", self.run.decay_factor),
            format!("eval.train_fraction = {}", self.run.train_fraction),
            format!("eval.repeats = {}", self.run.repeats),
            format!("metrics.bins = {}", self.recon.bins),
            format!("metrics.ssim_window = {}", self.recon.ssim_window),
            format!("metrics.hd_percentile = {}", self.hd_percentile),
            format!("ablate.pretext_per_class = {}", self.ablate.pretext_per_class),
            format!("ablate.pretext_epochs = {}", self.ablate.pretext_epochs),
            format!("ablate.target_per_class = {}", self.ablate.target_per_class),
            format!("ablate.finetune_epochs = {}", self.ablate.finetune_epochs),
            format!("ablate.repeats = {}", self.ablate.repeats),
            format!("ablate.fractions = {fractions}"),
            format!("ablate.sweep_seeds = {}", self.ablate.sweep_seeds),
            format!("ablate.sweep_epochs = {}", self.ablate.sweep_epochs),
            format!("ablate.holdout_per_class = {}", self.ablate.holdout_per_class),
        ];
        lines.sort();
        lines
    }

    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for line in self.resolved_lines() {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// FNV-1a of the resolved text; stored in checkpoint metadata.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.resolved_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
