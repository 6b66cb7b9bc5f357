//! Inference helpers and the stratified repeated-split evaluation protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loops::finetune;
use super::{derive_seed, Result, RunConfig, Sample, TrainError};
use crate::augment::AugmentConfig;
use crate::io::checkpoint::NamedTensors;
use crate::metrics::{
    auc, classification_metrics, reconstruction_metrics, segmentation_metrics, summarize,
    BinaryPrediction, MetricsReport, ReconConfig,
};
use crate::model::{Model, ModelConfig, PretextTasks};
use crate::tensor::Tape;
use crate::volume::{Volume, NUM_TISSUE_CLASSES};

const STREAM_SPLIT: u64 = 40;
const STREAM_REPEAT: u64 = 41;

/// Positive-class scores for a batch of labeled samples.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<BinaryPrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let label = s
            .class_label
            .ok_or_else(|| TrainError::MissingClass { id: s.id.clone() })?;
        let dims = [s.intensity.dims[2], s.intensity.dims[1], s.intensity.dims[0]];
        let mut tape = Tape::new();
        let binding = model.bind_inference(&mut tape);
        let x = tape.leaf(
            s.intensity.as_f32().unwrap().to_vec(),
            &[1, 1, dims[0], dims[1], dims[2]],
            false,
        )?;
        let logits = model.downstream_forward(&mut tape, &binding, x)?;
        let z = tape.data(logits);
        // softmax over the two logits; score is the positive-class probability
        let m = z[0].max(z[1]) as f64;
        let e0 = ((z[0] as f64) - m).exp();
        let e1 = ((z[1] as f64) - m).exp();
        out.push(BinaryPrediction {
            score: (e1 / (e0 + e1)) as f32,
            label,
        });
    }
    Ok(out)
}

/// Held-out quality of a pretext model on clean volumes.
#[derive(Debug, Clone, Copy)]
pub struct PretextEval {
    /// Mean negative Dice loss (soft overlap in [0, 1], higher is better).
    pub soft_dice: f64,
    /// Mean hard Dice over foreground classes of the argmax maps.
    pub hard_dice: f64,
    pub ssim: f64,
    pub mae: f64,
    pub nmi: f64,
}

pub fn eval_pretext(
    model: &Model,
    tasks: PretextTasks,
    samples: &[Sample],
    recon_cfg: &ReconConfig,
) -> Result<PretextEval> {
    if samples.is_empty() {
        return Err(TrainError::DatasetTooSmall { needed: 1, found: 0 });
    }
    let mut soft_dice = Vec::new();
    let mut hard_dice = Vec::new();
    let mut ssim = Vec::new();
    let mut mae = Vec::new();
    let mut nmi = Vec::new();
    for s in samples {
        let dims = [s.intensity.dims[2], s.intensity.dims[1], s.intensity.dims[0]];
        let spatial = dims[0] * dims[1] * dims[2];
        let mut tape = Tape::new();
        let binding = model.bind_inference(&mut tape);
        let x = tape.leaf(
            s.intensity.as_f32().unwrap().to_vec(),
            &[1, 1, dims[0], dims[1], dims[2]],
            false,
        )?;
        let (rec, seg) = model.pretext_forward(&mut tape, &binding, x, tasks)?;
        if let Some(rec) = rec {
            let recon = s.intensity.with_f32_data(tape.data(rec).to_vec()).unwrap();
            let m = reconstruction_metrics(&s.intensity, &recon, recon_cfg)?;
            ssim.push(m.ssim);
            mae.push(m.mae);
            nmi.push(m.nmi);
        }
        if let Some(seg) = seg {
            let labels = s
                .labels
                .as_ref()
                .ok_or_else(|| TrainError::MissingLabels { id: s.id.clone() })?;
            let target = super::losses::one_hot(&[labels.as_u8().unwrap()], spatial);
            let dice_id = tape.dice_loss(seg, &target)?;
            soft_dice.push(-tape.scalar_f64(dice_id).unwrap());
            // argmax labels for the hard metrics
            let p = tape.data(seg);
            let mut arg = vec![0u8; spatial];
            for (v, slot) in arg.iter_mut().enumerate() {
                let mut best = 0usize;
                for c in 1..NUM_TISSUE_CLASSES {
                    if p[c * spatial + v] > p[best * spatial + v] {
                        best = c;
                    }
                }
                *slot = best as u8;
            }
            let pred = Volume::new_labels(s.intensity.dims, s.intensity.spacing, arg).unwrap();
            let m = segmentation_metrics(&pred, labels, 100.0)?;
            hard_dice.push(m.mean_dice);
        }
    }
    let mean = |v: &Vec<f64>| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(PretextEval {
        soft_dice: mean(&soft_dice),
        hard_dice: mean(&hard_dice),
        ssim: mean(&ssim),
        mae: mean(&mae),
        nmi: mean(&nmi),
    })
}

/// Stratified per-class split into train/test index sets. Every class keeps
/// at least one test sample; classes with fewer than 2 samples reject.
pub fn stratified_split(
    labels: &[u8],
    train_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let classes: Vec<u8> = {
        let mut c: Vec<u8> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(TrainError::ClassTooSmall {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(rng);
        let mut n_train = (train_fraction * idx.len() as f64).round() as usize;
        n_train = n_train.clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Fine-tunes on stratified 80/20 splits across `repeats` independent seeds
/// and reports mean and standard deviation of the five classification
/// metrics (AUC, ACC, SEN, SPE, F1, all percent-scaled).
pub fn repeated_split_eval(
    samples: &[Sample],
    encoder: Option<&NamedTensors>,
    run: &RunConfig,
    model_cfg: ModelConfig,
    aug: &AugmentConfig,
) -> Result<MetricsReport> {
    run.validate()?;
    let labels: Vec<u8> = samples
        .iter()
        .map(|s| {
            s.class_label
                .ok_or_else(|| TrainError::MissingClass { id: s.id.clone() })
        })
        .collect::<Result<_>>()?;
    let mut collected: [Vec<f64>; 5] = Default::default();
    for repeat in 0..run.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            run.seed,
            STREAM_SPLIT,
            repeat as u64,
        ));
        let (train_idx, test_idx) = stratified_split(&labels, run.train_fraction, &mut rng)?;
        let train: Vec<Sample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
        let test: Vec<Sample> = test_idx.iter().map(|&i| samples[i].clone()).collect();
        let mut fold_run = run.clone();
        fold_run.seed = derive_seed(run.seed, STREAM_REPEAT, repeat as u64);
        let out = finetune(&train, encoder, &fold_run, model_cfg, aug)?;
        let preds = predict(&out.model, &test)?;
        let m = classification_metrics(&preds, 0.5)?;
        let roc = auc(&preds)? * 100.0;
        for (slot, v) in collected
            .iter_mut()
            .zip([roc, m.acc, m.sen, m.spe, m.f1])
        {
            slot.push(v);
        }
    }
    let rows = ["auc", "acc", "sen", "spe", "f1"]
        .iter()
        .zip(&collected)
        .map(|(name, values)| summarize(name, values))
        .collect();
    Ok(MetricsReport {
        task: "classification".to_string(),
        rows,
    })
}
