//! Hard Dice, average surface distance, and Hausdorff distance per tissue
//! class, in millimeters via the voxel spacing.

use super::MetricsError;
use crate::volume::{Volume, NUM_TISSUE_CLASSES};

#[derive(Debug, Clone, Copy)]
pub struct ClassMetrics {
    pub dice: f64,
    /// Symmetric mean surface distance in mm; undefined when the class is
    /// present in exactly one volume.
    pub asd: Option<f64>,
    pub hd: Option<f64>,
    pub in_pred: bool,
    pub in_truth: bool,
}

#[derive(Debug, Clone)]
pub struct SegMetrics {
    pub per_class: Vec<ClassMetrics>,
    /// Means over the foreground classes WM, GM, CSF.
    pub mean_dice: f64,
    pub mean_asd: Option<f64>,
    pub mean_hd: Option<f64>,
    pub degenerate: bool,
}

/// Boundary voxels of one class under 6-connectivity: a class voxel with at
/// least one face neighbor outside the class (the volume border counts as
/// outside).
pub fn surface_voxels(labels: &[u8], dims: [usize; 3], class: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = dims;
    let at = |x: i64, y: i64, z: i64| -> bool {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            return false;
        }
        labels[x as usize + nx * (y as usize + ny * z as usize)] == class
    };
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if labels[x + nx * (y + ny * z)] != class {
                    continue;
                }
                let (xi, yi, zi) = (x as i64, y as i64, z as i64);
                let boundary = !at(xi - 1, yi, zi)
                    || !at(xi + 1, yi, zi)
                    || !at(xi, yi - 1, zi)
                    || !at(xi, yi + 1, zi)
                    || !at(xi, yi, zi - 1)
                    || !at(xi, yi, zi + 1);
                if boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f32; 3]) -> Vec<f64> {
    let s = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64];
    from.iter()
        .map(|a| {
            let mut best = f64::INFINITY;
            for b in to {
                let dx = (a[0] as f64 - b[0] as f64) * s[0];
                let dy = (a[1] as f64 - b[1] as f64) * s[1];
                let dz = (a[2] as f64 - b[2] as f64) * s[2];
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                if d < best {
                    best = d;
                }
            }
            best
        })
        .collect()
}

/// Nearest-rank percentile; 100 gives the exact maximum.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-class Dice/ASD/HD plus foreground means. A class empty in exactly one
/// volume scores Dice 0 with undefined distances (flagged); empty in both
/// scores Dice 1 with zero distances.
pub fn segmentation_metrics(
    pred: &Volume,
    truth: &Volume,
    hd_percentile: f64,
) -> Result<SegMetrics, MetricsError> {
    if pred.dims != truth.dims {
        return Err(MetricsError::DimsMismatch {
            a: pred.dims,
            b: truth.dims,
        });
    }
    let (Some(p), Some(t)) = (pred.as_u8(), truth.as_u8()) else {
        return Err(MetricsError::NotLabels);
    };
    let spacing = truth.spacing;
    let mut per_class = Vec::with_capacity(NUM_TISSUE_CLASSES);
    for class in 0..NUM_TISSUE_CLASSES as u8 {
        let p_count = p.iter().filter(|&&v| v == class).count();
        let t_count = t.iter().filter(|&&v| v == class).count();
        let inter = p
            .iter()
            .zip(t)
            .filter(|&(&a, &b)| a == class && b == class)
            .count();
        let metrics = match (p_count > 0, t_count > 0) {
            (false, false) => ClassMetrics {
                dice: 1.0,
                asd: Some(0.0),
                hd: Some(0.0),
                in_pred: false,
                in_truth: false,
            },
            (true, true) => {
                let dice = 2.0 * inter as f64 / (p_count + t_count) as f64;
                let ps = surface_voxels(p, pred.dims, class);
                let ts = surface_voxels(t, truth.dims, class);
                let d_pt = directed_distances(&ps, &ts, spacing);
                let d_tp = directed_distances(&ts, &ps, spacing);
                let asd = (d_pt.iter().sum::<f64>() + d_tp.iter().sum::<f64>())
                    / (d_pt.len() + d_tp.len()) as f64;
                let mut sp = d_pt.clone();
                sp.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut st = d_tp.clone();
                st.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let hd = percentile(&sp, hd_percentile).max(percentile(&st, hd_percentile));
                ClassMetrics {
                    dice,
                    asd: Some(asd),
                    hd: Some(hd),
                    in_pred: true,
                    in_truth: true,
                }
            }
            (in_pred, in_truth) => ClassMetrics {
                dice: 0.0,
                asd: None,
                hd: None,
                in_pred,
                in_truth,
            },
        };
        per_class.push(metrics);
    }
    let (mean_dice, mean_asd, mean_hd, degenerate) = {
        let fg = &per_class[1..];
        let mean_of = |f: fn(&ClassMetrics) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = fg.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        (
            fg.iter().map(|c| c.dice).sum::<f64>() / fg.len() as f64,
            mean_of(|c| c.asd),
            mean_of(|c| c.hd),
            fg.iter().any(|c| c.asd.is_none()),
        )
    };
    Ok(SegMetrics {
        per_class,
        mean_dice,
        mean_asd,
        mean_hd,
        degenerate,
    })
}
