//! Loss assembly on the tape: the reconstruction l1 term, the class-averaged
//! soft Dice term, their unweighted sum, and one-hot target construction.

use super::{Result, TrainError};
use crate::model::PretextTasks;
use crate::tensor::{Tape, TensorId};
use crate::volume::NUM_TISSUE_CLASSES;

/// Combined pretext loss with exact f64 term values for logging.
#[derive(Debug, Clone, Copy)]
pub struct PretextLoss {
    pub loss: TensorId,
    pub l_rec: Option<f64>,
    pub l_seg: Option<f64>,
    pub l_total: f64,
}

/// Builds the task-dependent pretext loss: both terms summed, or the single
/// active term.
pub fn pretext_loss(
    tape: &mut Tape,
    rec_out: Option<TensorId>,
    rec_target: Option<&[f32]>,
    seg_out: Option<TensorId>,
    seg_target: Option<&[f32]>,
    tasks: PretextTasks,
) -> Result<PretextLoss> {
    let rec = match (tasks.has_rec(), rec_out, rec_target) {
        (true, Some(out), Some(target)) => Some(tape.l1_loss(out, target)?),
        (true, _, _) => {
            return Err(TrainError::Config(
                "reconstruction task active but output or target missing".into(),
            ))
        }
        _ => None,
    };
    let seg = match (tasks.has_seg(), seg_out, seg_target) {
        (true, Some(out), Some(target)) => Some(tape.dice_loss(out, target)?),
        (true, _, _) => {
            return Err(TrainError::Config(
                "segmentation task active but output or target missing".into(),
            ))
        }
        _ => None,
    };
    let l_rec = rec.map(|id| tape.scalar_f64(id).expect("l1 is a scalar reduction"));
    let l_seg = seg.map(|id| tape.scalar_f64(id).expect("dice is a scalar reduction"));
    let (loss, l_total) = match (rec, seg) {
        (Some(r), Some(s)) => {
            let sum = tape.add(r, s)?;
            (sum, l_rec.unwrap() + l_seg.unwrap())
        }
        (Some(r), None) => (r, l_rec.unwrap()),
        (None, Some(s)) => (s, l_seg.unwrap()),
        (None, None) => {
            return Err(TrainError::Config("no pretext task selected".into()));
        }
    };
    Ok(PretextLoss {
        loss,
        l_rec,
        l_seg,
        l_total,
    })
}

/// One-hot encoding of a batch of label maps into N x 4 x D x H x W order.
pub fn one_hot(batch_labels: &[&[u8]], spatial: usize) -> Vec<f32> {
    let n = batch_labels.len();
    let mut out = vec![0.0f32; n * NUM_TISSUE_CLASSES * spatial];
    for (i, labels) in batch_labels.iter().enumerate() {
        debug_assert_eq!(labels.len(), spatial);
        let base = i * NUM_TISSUE_CLASSES * spatial;
        for (v, &l) in labels.iter().enumerate() {
            out[base + l as usize * spatial + v] = 1.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_marks_exactly_one_class_per_voxel() {
        let labels: Vec<u8> = vec![0, 1, 2, 3, 3, 0];
        let oh = one_hot(&[&labels], 6);
        for v in 0..6 {
            let marks: Vec<usize> = (0..4).filter(|&c| oh[c * 6 + v] == 1.0).collect();
            assert_eq!(marks, vec![labels[v] as usize]);
        }
    }

    #[test]
    fn total_is_the_sum_of_active_terms() {
        let mut tape = Tape::new();
        // tiny fake outputs: rec 2 voxels, seg 2 classes x 1 voxel
        let rec = tape.leaf(vec![0.0, 1.0], &[1, 1, 1, 1, 2], true).unwrap();
        let seg = tape
            .leaf(vec![0.7, 0.3], &[1, 2, 1, 1, 1], true)
            .unwrap();
        let seg_probs = tape.softmax_channels(seg).unwrap();
        let out = pretext_loss(
            &mut tape,
            Some(rec),
            Some(&[1.0, 1.0]),
            Some(seg_probs),
            Some(&[1.0, 0.0]),
            PretextTasks::Both,
        )
        .unwrap();
        assert!((out.l_total - (out.l_rec.unwrap() + out.l_seg.unwrap())).abs() < 1e-12);
        assert!((out.l_rec.unwrap() - 0.5).abs() < 1e-12);

        let rec_only = pretext_loss(
            &mut tape,
            Some(rec),
            Some(&[1.0, 1.0]),
            None,
            None,
            PretextTasks::RecOnly,
        )
        .unwrap();
        assert_eq!(rec_only.l_seg, None);
        assert!((rec_only.l_total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn example_arithmetic_for_the_sum() {
        // l_rec 0.2 and l_seg -0.9 combine to -0.7; single-task variants
        // report just their own term
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.2], &[1, 1, 1, 1, 1], true).unwrap();
        let rec = tape.l1_loss(a, &[0.0]).unwrap();
        assert!((tape.scalar_f64(rec).unwrap() - 0.2).abs() < 1e-7);
    }
}
