//! The two optimization loops: pretext training of encoder + decoders, and
//! supervised fine-tuning of the downstream classifier with an optionally
//! frozen transferred encoder.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{one_hot, pretext_loss};
use super::{derive_seed, LossRecord, Result, RunConfig, Sample, Stage, TrainError};
use crate::augment::{apply_affine, draw_affine_params, sample_pretext, AugmentConfig, Interpolation};
use crate::io::checkpoint::NamedTensors;
use crate::model::{Binding, Model, ModelConfig, ParamTensor};
use crate::tensor::{Adam, AdamHyper, Tape};
use crate::volume::{Volume, NUM_TISSUE_CLASSES};

const STREAM_SUBSET: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_EPOCH: u64 = 3;
const STREAM_AUG: u64 = 4;
const STREAM_FT_INIT: u64 = 5;
const STREAM_FT_EPOCH: u64 = 6;
const STREAM_FT_AUG: u64 = 7;

#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub trace: Vec<LossRecord>,
    /// Samples per epoch after the pretrain-fraction cut (pretext only).
    pub used_samples: usize,
}

/// Tensor spatial dims for a volume: x-fastest storage maps to
/// [depth = z, height = y, width = x].
fn tensor_dims(v: &Volume) -> [usize; 3] {
    [v.dims[2], v.dims[1], v.dims[0]]
}

fn collect_grads(tape: &Tape, binding: &Binding) -> HashMap<String, Vec<f32>> {
    let mut out = HashMap::new();
    for (name, &id) in binding.iter() {
        if let Some(g) = tape.grad(id) {
            out.insert(name.clone(), g.to_vec());
        }
    }
    out
}

fn apply_grads(model: &mut Model, adam: &mut Adam, grads: &HashMap<String, Vec<f32>>) {
    let mut triples: Vec<(&str, &mut [f32], &[f32])> = Vec::new();
    for ParamTensor {
        name, data, frozen, ..
    } in model.params.entries_mut()
    {
        if *frozen {
            continue;
        }
        if let Some(g) = grads.get(name.as_str()) {
            triples.push((name.as_str(), data.as_mut_slice(), g.as_slice()));
        }
    }
    adam.step(triples);
}

/// Trains the pretext model: fresh per-sample corruption each epoch when
/// augmentation is on, clean volumes as reconstruction targets, and only the
/// first `pretrain_fraction` of the shuffled dataset.
pub fn pretrain(
    samples: &[Sample],
    run: &RunConfig,
    model_cfg: ModelConfig,
    aug: &AugmentConfig,
) -> Result<TrainOutput> {
    run.validate()?;
    let tasks = run.tasks;
    if tasks.has_seg() {
        if let Some(s) = samples.iter().find(|s| s.labels.is_none()) {
            return Err(TrainError::MissingLabels { id: s.id.clone() });
        }
    }
    let n_used = (run.pretrain_fraction * samples.len() as f64).round() as usize;
    if n_used < run.pretext_batch {
        return Err(TrainError::DatasetTooSmall {
            needed: run.pretext_batch,
            found: n_used,
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        run.seed,
        STREAM_SUBSET,
        0,
    )));
    let used = &order[..n_used];

    let mut model = Model::init_pretext(model_cfg, tasks, derive_seed(run.seed, STREAM_INIT, 0))?;
    let mut adam = Adam::new(AdamHyper {
        lr: run.pretext_lr as f32,
        ..Default::default()
    });
    let mut trace = Vec::new();

    for epoch in 0..run.pretext_epochs {
        // augmentation supplements rather than replaces: each epoch sees the
        // clean sample plus one freshly drawn corrupted copy
        let mut epoch_order: Vec<(usize, bool)> = if run.augment {
            used.iter().flat_map(|&i| [(i, false), (i, true)]).collect()
        } else {
            used.iter().map(|&i| (i, false)).collect()
        };
        epoch_order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            run.seed,
            STREAM_EPOCH,
            epoch as u64,
        )));
        for (step, chunk) in epoch_order.chunks(run.pretext_batch).enumerate() {
            let n = chunk.len();
            let dims = tensor_dims(&samples[chunk[0].0].intensity);
            let spatial = dims[0] * dims[1] * dims[2];
            let mut input = Vec::with_capacity(n * spatial);
            let mut rec_target = Vec::with_capacity(n * spatial);
            let mut label_slices: Vec<Vec<u8>> = Vec::with_capacity(n);
            for &(idx, corrupted) in chunk {
                let s = &samples[idx];
                if corrupted {
                    let triplet = sample_pretext(
                        &s.intensity,
                        s.labels.as_ref(),
                        aug,
                        derive_seed(run.seed, STREAM_AUG, (epoch * samples.len() + idx) as u64),
                    )?;
                    input.extend_from_slice(triplet.input.as_f32().unwrap());
                    rec_target.extend_from_slice(triplet.rec_target.as_f32().unwrap());
                    if let Some(lab) = triplet.labels {
                        label_slices.push(lab.as_u8().unwrap().to_vec());
                    }
                } else {
                    let clean = s.intensity.as_f32().unwrap();
                    input.extend_from_slice(clean);
                    rec_target.extend_from_slice(clean);
                    if let Some(lab) = &s.labels {
                        label_slices.push(lab.as_u8().unwrap().to_vec());
                    }
                }
            }
            let onehot = if tasks.has_seg() {
                let refs: Vec<&[u8]> = label_slices.iter().map(|l| l.as_slice()).collect();
                Some(one_hot(&refs, spatial))
            } else {
                None
            };

            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let x = tape.leaf(input, &[n, 1, dims[0], dims[1], dims[2]], false)?;
            let (rec, seg) = model.pretext_forward(&mut tape, &binding, x, tasks)?;
            let loss = pretext_loss(
                &mut tape,
                rec,
                if tasks.has_rec() {
                    Some(rec_target.as_slice())
                } else {
                    None
                },
                seg,
                onehot.as_deref(),
                tasks,
            )?;
            tape.backward(loss.loss)?;
            let grads = collect_grads(&tape, &binding);
            drop(tape);
            apply_grads(&mut model, &mut adam, &grads);

            trace.push(LossRecord {
                stage: Stage::Pretext,
                epoch,
                step,
                l_rec: loss.l_rec,
                l_seg: loss.l_seg,
                l_total: Some(loss.l_total),
                l_ce: None,
            });
        }
    }
    Ok(TrainOutput {
        model,
        trace,
        used_samples: n_used,
    })
}

/// Fine-tunes the downstream classifier. With an encoder checkpoint the
/// encoder loads frozen (zero updates); without one the whole model trains
/// from scratch. Every epoch sees each sample once clean and once
/// affine-augmented; the learning rate decays stepwise.
pub fn finetune(
    samples: &[Sample],
    encoder: Option<&NamedTensors>,
    run: &RunConfig,
    model_cfg: ModelConfig,
    aug: &AugmentConfig,
) -> Result<TrainOutput> {
    run.validate()?;
    if let Some(s) = samples.iter().find(|s| s.class_label.is_none()) {
        return Err(TrainError::MissingClass { id: s.id.clone() });
    }
    if samples.len() * 2 < run.finetune_batch {
        return Err(TrainError::DatasetTooSmall {
            needed: run.finetune_batch,
            found: samples.len() * 2,
        });
    }
    let mut model =
        Model::init_downstream(model_cfg, derive_seed(run.seed, STREAM_FT_INIT, 0))?;
    if let Some(enc) = encoder {
        model.params.apply_named(enc, true)?;
    }
    let mut adam = Adam::new(AdamHyper {
        lr: run.finetune_lr as f32,
        ..Default::default()
    });
    let mut trace = Vec::new();

    for epoch in 0..run.finetune_epochs {
        adam.hyper.lr =
            (run.finetune_lr * run.decay_factor.powi((epoch / run.decay_every) as i32)) as f32;
        let mut items: Vec<(usize, bool)> = (0..samples.len())
            .flat_map(|i| [(i, false), (i, true)])
            .collect();
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            run.seed,
            STREAM_FT_EPOCH,
            epoch as u64,
        )));
        for (step, chunk) in items.chunks(run.finetune_batch).enumerate() {
            let n = chunk.len();
            let dims = tensor_dims(&samples[chunk[0].0].intensity);
            let spatial = dims[0] * dims[1] * dims[2];
            let mut input = Vec::with_capacity(n * spatial);
            let mut labels = Vec::with_capacity(n);
            for &(idx, augmented) in chunk {
                let s = &samples[idx];
                if augmented {
                    let params = draw_affine_params(
                        aug,
                        derive_seed(run.seed, STREAM_FT_AUG, (epoch * samples.len() + idx) as u64),
                    );
                    let moved = apply_affine(&s.intensity, &params, Interpolation::Trilinear)?;
                    input.extend_from_slice(moved.as_f32().unwrap());
                } else {
                    input.extend_from_slice(s.intensity.as_f32().unwrap());
                }
                labels.push(s.class_label.unwrap() as usize);
            }

            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let x = tape.leaf(input, &[n, 1, dims[0], dims[1], dims[2]], false)?;
            let logits = model.downstream_forward(&mut tape, &binding, x)?;
            let ce = tape.cross_entropy(logits, &labels)?;
            let l_ce = tape.scalar_f64(ce).expect("cross entropy is scalar");
            tape.backward(ce)?;
            let grads = collect_grads(&tape, &binding);
            drop(tape);
            apply_grads(&mut model, &mut adam, &grads);

            trace.push(LossRecord {
                stage: Stage::Finetune,
                epoch,
                step,
                l_rec: None,
                l_seg: None,
                l_total: None,
                l_ce: Some(l_ce),
            });
        }
    }
    Ok(TrainOutput {
        model,
        trace,
        used_samples: samples.len(),
    })
}

/// Number of tissue classes the segmentation head emits; re-exported here so
/// loop callers need not reach into the volume module.
pub const SEG_CLASSES: usize = NUM_TISSUE_CLASSES;
