//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bapm_core::io::checkpoint::{load_checkpoint, save_checkpoint, NamedTensors};
use bapm_core::io::nifti::{read_nifti, write_nifti};
use bapm_core::metrics::{reconstruction_metrics, segmentation_metrics, MetricsReport};
use bapm_core::model::{
    crop_with_record, pad_to_multiple, DecoderHead, Model, ModelConfig, PretextTasks,
};
use bapm_core::phantom::generate_dataset;
use bapm_core::tensor::Tape;
use bapm_core::train::{
    ablation_csv, finetune, finetune_trace_csv, load_dataset, pretext_trace_csv, pretrain,
    repeated_split_eval, run_fraction_sweep, run_task_matrix, write_dataset,
};
use bapm_core::volume::{Volume, NUM_TISSUE_CLASSES};

use crate::config::Config;
use crate::{Cmd, EvalTask};

pub fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::PhantomGen { common, count, out } => phantom_gen(&common.resolve()?, count, &out),
        Cmd::Pretrain { common, data, out } => cmd_pretrain(&common.resolve()?, &data, &out),
        Cmd::Finetune {
            common,
            data,
            encoder,
            out,
        } => cmd_finetune(&common.resolve()?, &data, encoder.as_deref(), &out),
        Cmd::Reconstruct {
            common,
            ckpt,
            input,
            out,
        } => infer(&common.resolve()?, &ckpt, &input, &out, None, DecoderHead::Reconstruction),
        Cmd::Segment {
            common,
            ckpt,
            input,
            out,
            probs,
        } => infer(
            &common.resolve()?,
            &ckpt,
            &input,
            &out,
            probs.as_deref(),
            DecoderHead::Segmentation,
        ),
        Cmd::Evaluate {
            common,
            task,
            pred,
            truth,
            data,
            encoder,
            out,
        } => evaluate(
            &common.resolve()?,
            task,
            pred.as_deref(),
            truth.as_deref(),
            data.as_deref(),
            encoder.as_deref(),
            &out,
        ),
        Cmd::Ablate { common, out } => ablate(&common.resolve()?, &out),
    }
}

fn write_resolved_config(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved_config.txt"), cfg.resolved_text())?;
    Ok(())
}

fn phantom_gen(cfg: &Config, count: usize, out: &Path) -> Result<()> {
    if count == 0 || count % 2 != 0 {
        bail!("--count must be a positive even number for balanced classes, got {count}");
    }
    write_resolved_config(cfg, out)?;
    let samples = generate_dataset(count / 2, &cfg.phantom, cfg.run.seed)?;
    write_dataset(out, &samples)?;
    println!(
        "wrote {} phantoms ({} files) and manifest.csv to {}",
        samples.len(),
        2 * samples.len(),
        out.display()
    );
    Ok(())
}

fn checkpoint_metadata(cfg: &Config, tasks: PretextTasks, epochs: usize) -> Vec<(String, String)> {
    let tasks_name = match tasks {
        PretextTasks::Both => "both",
        PretextTasks::RecOnly => "rec_only",
        PretextTasks::SegOnly => "seg_only",
    };
    vec![
        ("config_hash".to_string(), format!("{:016x}", cfg.hash())),
        ("width_factor".to_string(), cfg.model.width_factor.to_string()),
        ("num_classes".to_string(), cfg.model.num_classes.to_string()),
        ("tasks".to_string(), tasks_name.to_string()),
        ("seed".to_string(), cfg.run.seed.to_string()),
        ("epochs".to_string(), epochs.to_string()),
    ]
}

fn cmd_pretrain(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let samples = load_dataset(data)?;
    let output = pretrain(&samples, &cfg.run, cfg.model, &cfg.augment)?;
    let meta = checkpoint_metadata(cfg, cfg.run.tasks, cfg.run.pretext_epochs);
    save_checkpoint(
        &output.model.params.to_named_tensors(),
        &meta,
        out.join("pretext.ckpt"),
    )?;
    std::fs::write(out.join("pretext_trace.csv"), pretext_trace_csv(&output.trace))?;
    println!(
        "pretext training done: {} samples used per epoch, checkpoint at {}",
        output.used_samples,
        out.join("pretext.ckpt").display()
    );
    Ok(())
}

fn cmd_finetune(cfg: &Config, data: &Path, encoder: Option<&Path>, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let samples = load_dataset(data)?;
    let enc = match encoder {
        Some(path) => {
            let (tensors, _) = load_checkpoint(path, Some("encoder."))?;
            Some(tensors)
        }
        None => None,
    };
    let output = finetune(&samples, enc.as_ref(), &cfg.run, cfg.model, &cfg.augment)?;
    let meta = checkpoint_metadata(cfg, cfg.run.tasks, cfg.run.finetune_epochs);
    save_checkpoint(
        &output.model.params.to_named_tensors(),
        &meta,
        out.join("downstream.ckpt"),
    )?;
    std::fs::write(
        out.join("finetune_trace.csv"),
        finetune_trace_csv(&output.trace),
    )?;
    println!(
        "fine-tuning done ({}), checkpoint at {}",
        if enc.is_some() {
            "frozen transferred encoder"
        } else {
            "from scratch"
        },
        out.join("downstream.ckpt").display()
    );
    Ok(())
}

/// Rebuilds a pretext model from a checkpoint, taking the architecture from
/// its metadata.
fn model_from_checkpoint(path: &Path) -> Result<(Model, PretextTasks)> {
    let (tensors, meta) = load_checkpoint(path, None)?;
    let get = |key: &str| -> Option<&str> {
        meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    };
    let width: f64 = get("width_factor")
        .context("checkpoint metadata lacks width_factor")?
        .parse()?;
    let num_classes: usize = get("num_classes").map_or(Ok(2), |v| v.parse())?;
    let tasks = match get("tasks") {
        Some("rec_only") => PretextTasks::RecOnly,
        Some("seg_only") => PretextTasks::SegOnly,
        _ => PretextTasks::Both,
    };
    let cfg = ModelConfig {
        width_factor: width,
        num_classes,
        ..Default::default()
    };
    let mut model = Model::init_pretext(cfg, tasks, 0)?;
    model.params.apply_named(&tensors, false)?;
    Ok((model, tasks))
}

fn infer(
    cfg: &Config,
    ckpt: &Path,
    input: &Path,
    out: &Path,
    probs_dir: Option<&Path>,
    head: DecoderHead,
) -> Result<()> {
    let (model, tasks) = model_from_checkpoint(ckpt)?;
    match head {
        DecoderHead::Reconstruction if !tasks.has_rec() => {
            bail!("checkpoint was trained without the reconstruction decoder")
        }
        DecoderHead::Segmentation if !tasks.has_seg() => {
            bail!("checkpoint was trained without the segmentation decoder")
        }
        _ => {}
    }
    let volume = read_nifti(input)?;
    let data = volume.to_f32_vec();
    let (padded, padded_dims, record) = pad_to_multiple(&data, volume.dims, 16);
    // volume storage is x-fastest, so tensor spatial order is (z, y, x)
    let tdims = [padded_dims[2], padded_dims[1], padded_dims[0]];

    let mut tape = Tape::new();
    let binding = model.bind_inference(&mut tape);
    let x = tape
        .leaf(padded, &[1, 1, tdims[0], tdims[1], tdims[2]], false)
        .map_err(bapm_core::model::ModelError::from)?;
    let enc = model.encoder_forward(&mut tape, &binding, x)?;
    let (feat_rec, feat_seg) = model.split_features(&mut tape, enc)?;
    let features = match head {
        DecoderHead::Reconstruction => feat_rec,
        DecoderHead::Segmentation => feat_seg,
    };
    let decoded = model.decoder_forward(&mut tape, &binding, features, head)?;

    match head {
        DecoderHead::Reconstruction => {
            let full = tape.data(decoded);
            let cropped = crop_with_record(full, padded_dims, &record);
            let out_vol = Volume {
                data: bapm_core::volume::VoxelData::F32(cropped),
                ..volume.clone()
            };
            write_nifti(&out_vol, out)?;
            println!("reconstruction written to {}", out.display());
        }
        DecoderHead::Segmentation => {
            let p = tape.data(decoded);
            let spatial = padded_dims.iter().product::<usize>();
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
            let arg_f32: Vec<f32> = arg.iter().map(|&v| v as f32).collect();
            let cropped: Vec<u8> = crop_with_record(&arg_f32, padded_dims, &record)
                .iter()
                .map(|&v| v as u8)
                .collect();
            let mut out_vol = Volume::new_labels(volume.dims, volume.spacing, cropped)?;
            out_vol.origin = volume.origin;
            out_vol.direction = volume.direction;
            write_nifti(&out_vol, out)?;
            println!("label map written to {}", out.display());
            if let Some(dir) = probs_dir {
                std::fs::create_dir_all(dir)?;
                for c in 0..NUM_TISSUE_CLASSES {
                    let class_map = &p[c * spatial..(c + 1) * spatial];
                    let cropped = crop_with_record(class_map, padded_dims, &record);
                    let vol = Volume {
                        data: bapm_core::volume::VoxelData::F32(cropped),
                        ..volume.clone()
                    };
                    write_nifti(&vol, dir.join(format!("prob_class{c}.nii")))?;
                }
                println!("probability maps written to {}", dir.display());
            }
        }
    }
    let _ = cfg;
    Ok(())
}

/// Pairs of (id, pred path, truth path): either two files or two dataset
/// directories matched by file name.
fn volume_pairs(pred: &Path, truth: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if pred.is_file() {
        let id = pred
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "pair".into());
        return Ok(vec![(id, pred.to_path_buf(), truth.to_path_buf())]);
    }
    let mut names: Vec<String> = std::fs::read_dir(pred)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".nii"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let t = truth.join(&name);
        if t.exists() {
            out.push((
                name.trim_end_matches(".nii").to_string(),
                pred.join(&name),
                t,
            ));
        }
    }
    if out.is_empty() {
        bail!(
            "no matching .nii pairs between {} and {}",
            pred.display(),
            truth.display()
        );
    }
    Ok(out)
}

fn evaluate(
    cfg: &Config,
    task: EvalTask,
    pred: Option<&Path>,
    truth: Option<&Path>,
    data: Option<&Path>,
    encoder: Option<&Path>,
    out: &Path,
) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let mut csv = String::from("task,id,metric,value\n");
    match task {
        EvalTask::Recon => {
            let (pred, truth) = pred.zip(truth).context("recon needs --pred and --truth")?;
            for (id, p, t) in volume_pairs(pred, truth)? {
                let pv = read_nifti(&p)?;
                let tv = read_nifti(&t)?;
                let m = reconstruction_metrics(&tv, &pv, &cfg.recon)?;
                for (metric, value) in [("mae", m.mae), ("nmi", m.nmi), ("ssim", m.ssim)] {
                    csv.push_str(&format!("recon,{id},{metric},{value:.6}\n"));
                }
            }
        }
        EvalTask::Seg => {
            let (pred, truth) = pred.zip(truth).context("seg needs --pred and --truth")?;
            for (id, p, t) in volume_pairs(pred, truth)? {
                let pv = read_nifti(&p)?;
                let tv = read_nifti(&t)?;
                let m = segmentation_metrics(&pv, &tv, cfg.hd_percentile)?;
                csv.push_str(&format!("seg,{id},dice,{:.6}\n", m.mean_dice));
                if let Some(asd) = m.mean_asd {
                    csv.push_str(&format!("seg,{id},asd,{asd:.6}\n"));
                }
                if let Some(hd) = m.mean_hd {
                    csv.push_str(&format!("seg,{id},hd,{hd:.6}\n"));
                }
            }
        }
        EvalTask::Classify => {
            let data = data.context("classify needs --data")?;
            let samples = load_dataset(data)?;
            let enc: Option<NamedTensors> = match encoder {
                Some(path) => Some(load_checkpoint(path, Some("encoder."))?.0),
                None => None,
            };
            let report: MetricsReport =
                repeated_split_eval(&samples, enc.as_ref(), &cfg.run, cfg.model, &cfg.augment)?;
            for row in &report.rows {
                for (i, v) in row.values.iter().enumerate() {
                    csv.push_str(&format!("classify,split_{i},{},{v:.6}\n", row.metric));
                }
                csv.push_str(&format!("classify,mean,{},{:.6}\n", row.metric, row.mean));
                csv.push_str(&format!("classify,std,{},{:.6}\n", row.metric, row.std));
            }
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), &csv)?;
    println!("metrics written to {}", out.join("metrics.csv").display());
    Ok(())
}

fn ablate(cfg: &Config, out: &Path) -> Result<()> {
    write_resolved_config(cfg, out)?;
    let matrix = run_task_matrix(&cfg.phantom, cfg.model, &cfg.augment, &cfg.run, &cfg.ablate)?;
    for (variant, report) in &matrix {
        let acc = report.get("acc").map_or(f64::NAN, |r| r.mean);
        println!("{}: mean acc {acc:.1}", variant.name());
    }
    let sweep = run_fraction_sweep(&cfg.phantom, cfg.model, &cfg.augment, &cfg.run, &cfg.ablate)?;
    for point in &sweep {
        println!(
            "fraction {:.1}: soft dice {:.3} +- {:.3}",
            point.fraction, point.soft_dice.mean, point.soft_dice.std
        );
    }
    std::fs::write(out.join("ablation.csv"), ablation_csv(&matrix, &sweep))?;
    println!("combined results at {}", out.join("ablation.csv").display());
    Ok(())
}
