//! Reconstruction fidelity: mean absolute error, normalized mutual
//! information over a joint histogram, and a 3D Gaussian-windowed SSIM.

use super::MetricsError;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy)]
pub struct ReconConfig {
    pub bins: usize,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            bins: 32,
            ssim_window: 7,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReconMetrics {
    pub mae: f64,
    pub nmi: f64,
    pub ssim: f64,
}

pub fn reconstruction_metrics(
    x: &Volume,
    x_hat: &Volume,
    cfg: &ReconConfig,
) -> Result<ReconMetrics, MetricsError> {
    if x.dims != x_hat.dims {
        return Err(MetricsError::DimsMismatch {
            a: x.dims,
            b: x_hat.dims,
        });
    }
    let a = x.to_f32_vec();
    let b = x_hat.to_f32_vec();
    let mae = a
        .iter()
        .zip(&b)
        .map(|(&p, &q)| (p as f64 - q as f64).abs())
        .sum::<f64>()
        / a.len() as f64;
    let nmi = nmi(&a, &b, cfg.bins);
    let ssim = ssim3d(&a, &b, x.dims, cfg)?;
    Ok(ReconMetrics { mae, nmi, ssim })
}

fn min_max(v: &[f32]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v {
        lo = lo.min(x as f64);
        hi = hi.max(x as f64);
    }
    (lo, hi)
}

/// 2*I(X;Y) / (H(X) + H(Y)) from a joint histogram over equal-width bins
/// spanning each volume's own range.
fn nmi(a: &[f32], b: &[f32], bins: usize) -> f64 {
    let (alo, ahi) = min_max(a);
    let (blo, bhi) = min_max(b);
    let bin_of = |v: f64, lo: f64, hi: f64| -> usize {
        if hi <= lo {
            return 0;
        }
        (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
    };
    let mut joint = vec![0.0f64; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        joint[bin_of(x as f64, alo, ahi) * bins + bin_of(y as f64, blo, bhi)] += 1.0;
    }
    let n = a.len() as f64;
    let mut ha = 0.0;
    let mut hb = 0.0;
    let mut hab = 0.0;
    let mut pa = vec![0.0f64; bins];
    let mut pb = vec![0.0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j] / n;
            pa[i] += p;
            pb[j] += p;
            if p > 0.0 {
                hab -= p * p.ln();
            }
        }
    }
    for &p in &pa {
        if p > 0.0 {
            ha -= p * p.ln();
        }
    }
    for &p in &pb {
        if p > 0.0 {
            hb -= p * p.ln();
        }
    }
    if ha + hb == 0.0 {
        // both volumes constant: identical histograms carry full information
        return if a == b { 1.0 } else { 0.0 };
    }
    let mi = ha + hb - hab;
    2.0 * mi / (ha + hb)
}

/// Separable Gaussian-weighted local filter with border renormalization.
fn local_filter(data: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let len = dims[axis];
        let mut next = vec![0.0f64; cur.len()];
        let index = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
        let lines: Vec<usize> = match axis {
            0 => (0..dims[2])
                .flat_map(|z| (0..dims[1]).map(move |y| index(0, y, z)))
                .collect(),
            1 => (0..dims[2])
                .flat_map(|z| (0..dims[0]).map(move |x| index(x, 0, z)))
                .collect(),
            _ => (0..dims[1])
                .flat_map(|y| (0..dims[0]).map(move |x| index(x, y, 0)))
                .collect(),
        };
        for base in lines {
            for i in 0..len {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (ki, &w) in kernel.iter().enumerate() {
                    let j = i as i64 + ki as i64 - radius;
                    if j < 0 || j >= len as i64 {
                        continue;
                    }
                    acc += w * cur[base + j as usize * stride];
                    wsum += w;
                }
                next[base + i * stride] = acc / wsum;
            }
        }
        cur = next;
    }
    cur
}

/// Mean local SSIM with a Gaussian window; dynamic range comes from the
/// reference volume.
fn ssim3d(a: &[f32], b: &[f32], dims: [usize; 3], cfg: &ReconConfig) -> Result<f64, MetricsError> {
    let (lo, hi) = min_max(a);
    let range = hi - lo;
    if range == 0.0 {
        return if a == b {
            Ok(1.0)
        } else {
            Err(MetricsError::ConstantVolume)
        };
    }
    let radius = (cfg.ssim_window / 2) as i64;
    let mut kernel = Vec::with_capacity(cfg.ssim_window);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma)).exp());
    }
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = af.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();

    let mu_a = local_filter(&af, dims, &kernel);
    let mu_b = local_filter(&bf, dims, &kernel);
    let e_aa = local_filter(&aa, dims, &kernel);
    let e_bb = local_filter(&bb, dims, &kernel);
    let e_ab = local_filter(&ab, dims, &kernel);

    let c1 = (cfg.k1 * range) * (cfg.k1 * range);
    let c2 = (cfg.k2 * range) * (cfg.k2 * range);
    let mut total = 0.0f64;
    for i in 0..af.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
    }
    Ok(total / af.len() as f64)
}
