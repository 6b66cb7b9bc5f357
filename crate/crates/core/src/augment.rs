//! Stochastic MRI corruptions for pretext inputs (affine, blur, noise, bias
//! field, motion ghosting) and the single affine augmentation used during
//! fine-tuning. Every transform is deterministic given (input, parameters,
//! seed); intensity-only transforms never touch label volumes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::volume::{Volume, VoxelData};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("trilinear interpolation requested on a label volume")]
    LabelInterpolation,
    #[error("motion composition is defined on intensity volumes only")]
    MotionOnLabels,
    #[error("bias field of order {order} needs {expected} coefficients, got {found}")]
    CoefficientCount {
        order: usize,
        expected: usize,
        found: usize,
    },
    #[error("motion weights must cover the original plus {movements} movements and sum to 1, got {found:?}")]
    BadWeights { movements: usize, found: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformCfg {
    pub enabled: bool,
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub affine: TransformCfg,
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub translation_vox: f64,
    pub blur: TransformCfg,
    pub blur_sigma_range: (f64, f64),
    pub noise: TransformCfg,
    pub noise_sigma_range: (f64, f64),
    pub bias: TransformCfg,
    pub bias_order: usize,
    pub bias_coeff_range: f64,
    pub motion: TransformCfg,
    pub motion_movements: (usize, usize),
    pub motion_rotation_deg: f64,
    pub motion_translation_vox: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let on = TransformCfg {
            enabled: true,
            prob: 0.5,
        };
        AugmentConfig {
            affine: on,
            rotation_deg: 10.0,
            scale_range: (0.9, 1.1),
            translation_vox: 5.0,
            blur: on,
            blur_sigma_range: (0.0, 2.0),
            noise: on,
            noise_sigma_range: (0.0, 0.05),
            bias: on,
            bias_order: 3,
            bias_coeff_range: 0.3,
            motion: on,
            motion_movements: (1, 3),
            motion_rotation_deg: 5.0,
            motion_translation_vox: 3.0,
        }
    }
}

impl AugmentConfig {
    /// Everything off; useful for clean-control runs.
    pub fn disabled() -> Self {
        let off = TransformCfg {
            enabled: false,
            prob: 0.0,
        };
        AugmentConfig {
            affine: off,
            blur: off,
            noise: off,
            bias: off,
            motion: off,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineParams {
    /// Euler angles in radians about x, y, z through the volume center.
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    pub translation: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            rotation: [0.0; 3],
            scale: [1.0; 3],
            translation: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct MotionParams {
    /// Rigid movements as (rotation radians, translation voxels).
    pub movements: Vec<([f64; 3], [f64; 3])>,
    /// Weight of the original followed by one weight per movement.
    pub weights: Vec<f64>,
}

/// One drawn realization of the corruption chain, applied in the fixed order
/// affine, blur, noise, bias, motion.
#[derive(Debug, Clone, Default)]
pub struct AugmentPlan {
    pub affine: Option<AffineParams>,
    pub blur: Option<[f64; 3]>,
    pub noise: Option<(f64, u64)>,
    pub bias: Option<(Vec<f64>, usize)>,
    pub motion: Option<MotionParams>,
}

/// Rotation matrix Rz*Ry*Rx for Euler angles.
fn rotation_matrix(rot: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = rot[0].sin_cos();
    let (sy, cy) = rot[1].sin_cos();
    let (sz, cz) = rot[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

#[inline]
fn trilinear_at(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> f32 {
    let x0 = p[0].floor();
    let y0 = p[1].floor();
    let z0 = p[2].floor();
    let fx = p[0] - x0;
    let fy = p[1] - y0;
    let fz = p[2] - z0;
    let mut acc = 0.0f64;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 0 { 1.0 - fx } else { fx })
                    * (if dy == 0 { 1.0 - fy } else { fy })
                    * (if dz == 0 { 1.0 - fz } else { fz });
                if w == 0.0 {
                    continue;
                }
                let (xi, yi, zi) = (x0 as i64 + dx, y0 as i64 + dy, z0 as i64 + dz);
                if xi < 0
                    || yi < 0
                    || zi < 0
                    || xi >= dims[0] as i64
                    || yi >= dims[1] as i64
                    || zi >= dims[2] as i64
                {
                    continue; // out of bounds contributes zero
                }
                let idx = xi as usize + dims[0] * (yi as usize + dims[1] * zi as usize);
                acc += w * data[idx] as f64;
            }
        }
    }
    acc as f32
}

#[inline]
fn nearest_at_u8(data: &[u8], dims: [usize; 3], p: [f64; 3]) -> u8 {
    let (xi, yi, zi) = (p[0].round() as i64, p[1].round() as i64, p[2].round() as i64);
    if xi < 0
        || yi < 0
        || zi < 0
        || xi >= dims[0] as i64
        || yi >= dims[1] as i64
        || zi >= dims[2] as i64
    {
        return 0;
    }
    data[xi as usize + dims[0] * (yi as usize + dims[1] * zi as usize)]
}

#[inline]
fn nearest_at_f32(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> f32 {
    let (xi, yi, zi) = (p[0].round() as i64, p[1].round() as i64, p[2].round() as i64);
    if xi < 0
        || yi < 0
        || zi < 0
        || xi >= dims[0] as i64
        || yi >= dims[1] as i64
        || zi >= dims[2] as i64
    {
        return 0.0;
    }
    data[xi as usize + dims[0] * (yi as usize + dims[1] * zi as usize)]
}

/// Resamples through the inverse map: each output voxel pulls from
/// source = S^-1 R^T (out - center - t) + center. Out-of-bounds reads are 0.
/// Label volumes must use nearest interpolation.
pub fn apply_affine(
    volume: &Volume,
    params: &AffineParams,
    interpolation: Interpolation,
) -> Result<Volume, AugmentError> {
    if volume.is_labels() && interpolation == Interpolation::Trilinear {
        return Err(AugmentError::LabelInterpolation);
    }
    let dims = volume.dims;
    let center = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let rot = rotation_matrix(params.rotation);
    let source_of = |o: [f64; 3]| -> [f64; 3] {
        let v = [
            o[0] - center[0] - params.translation[0],
            o[1] - center[1] - params.translation[1],
            o[2] - center[2] - params.translation[2],
        ];
        let mut p = [0.0; 3];
        for a in 0..3 {
            // transpose = inverse for the rotation part
            let r = rot[0][a] * v[0] + rot[1][a] * v[1] + rot[2][a] * v[2];
            p[a] = r / params.scale[a] + center[a];
        }
        p
    };

    let mut out_f32: Option<Vec<f32>> = None;
    let mut out_u8: Option<Vec<u8>> = None;
    match &volume.data {
        VoxelData::F32(_) => out_f32 = Some(vec![0.0; volume.numel()]),
        VoxelData::U8(_) => out_u8 = Some(vec![0; volume.numel()]),
    }
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = source_of([x as f64, y as f64, z as f64]);
                match &volume.data {
                    VoxelData::F32(d) => {
                        let v = match interpolation {
                            Interpolation::Trilinear => trilinear_at(d, dims, p),
                            Interpolation::Nearest => nearest_at_f32(d, dims, p),
                        };
                        out_f32.as_mut().unwrap()[idx] = v;
                    }
                    VoxelData::U8(d) => {
                        out_u8.as_mut().unwrap()[idx] = nearest_at_u8(d, dims, p);
                    }
                }
                idx += 1;
            }
        }
    }
    Ok(match (out_f32, out_u8) {
        (Some(d), _) => volume.with_f32_data(d).expect("same dims"),
        (_, Some(d)) => volume.with_u8_data(d).expect("same dims"),
        _ => unreachable!(),
    })
}

/// Separable Gaussian blur, kernel truncated at ceil(3*sigma) and normalized
/// to sum 1. Borders renormalize over the in-bounds support, which keeps
/// constant volumes constant. A zero-sigma axis is skipped entirely.
pub fn gaussian_blur(volume: &Volume, sigma: [f64; 3]) -> Result<Volume, AugmentError> {
    let Some(src) = volume.as_f32() else {
        return Err(AugmentError::LabelInterpolation);
    };
    let dims = volume.dims;
    let mut data: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        if sigma[axis] <= 0.0 {
            continue;
        }
        let radius = (3.0 * sigma[axis]).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut total = 0.0f64;
        for i in -radius..=radius {
            let w = (-((i * i) as f64) / (2.0 * sigma[axis] * sigma[axis])).exp();
            kernel.push(w);
            total += w;
        }
        for w in kernel.iter_mut() {
            *w /= total;
        }
        data = blur_axis(&data, dims, axis, &kernel, radius);
    }
    Ok(volume
        .with_f32_data(data.iter().map(|&v| v as f32).collect())
        .expect("same dims"))
}

fn blur_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64], radius: i64) -> Vec<f64> {
    let mut out = vec![0.0f64; data.len()];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let len = dims[axis];
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
                acc += w * data[base + j as usize * stride];
                wsum += w;
            }
            out[base + i * stride] = acc / wsum;
        }
    }
    out
}

/// Adds i.i.d. zero-mean Gaussian noise. Output is deliberately not clamped;
/// reconstruction targets stay clean so the decoder learns to denoise.
pub fn add_gaussian_noise(volume: &Volume, sigma: f64, seed: u64) -> Result<Volume, AugmentError> {
    let Some(src) = volume.as_f32() else {
        return Err(AugmentError::LabelInterpolation);
    };
    if sigma <= 0.0 {
        return Ok(volume.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, sigma).unwrap();
    let data = src
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Ok(volume.with_f32_data(data).expect("same dims"))
}

/// Number of monomials of total degree <= order in three variables.
pub fn bias_coefficient_count(order: usize) -> usize {
    (order + 1) * (order + 2) * (order + 3) / 6
}

/// Multiplies by exp(P(u, v, w)) with coordinates normalized to [-1, 1] and P
/// a polynomial of total degree <= order. Coefficients index the monomials
/// (i, j, k) in lexicographic order.
pub fn apply_bias_field(
    volume: &Volume,
    coefficients: &[f64],
    order: usize,
) -> Result<Volume, AugmentError> {
    let Some(src) = volume.as_f32() else {
        return Err(AugmentError::LabelInterpolation);
    };
    let expected = bias_coefficient_count(order);
    if coefficients.len() != expected {
        return Err(AugmentError::CoefficientCount {
            order,
            expected,
            found: coefficients.len(),
        });
    }
    let dims = volume.dims;
    let norm = |i: usize, n: usize| -> f64 {
        if n <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (n as f64 - 1.0) - 1.0
        }
    };
    // per-axis power tables
    let powers = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let u = norm(i, n);
                let mut p = vec![1.0; order + 1];
                for e in 1..=order {
                    p[e] = p[e - 1] * u;
                }
                p
            })
            .collect()
    };
    let px = powers(dims[0]);
    let py = powers(dims[1]);
    let pz = powers(dims[2]);
    let mut out = vec![0.0f32; src.len()];
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut poly = 0.0f64;
                let mut c = 0;
                for i in 0..=order {
                    for j in 0..=order - i {
                        for k in 0..=order - i - j {
                            poly += coefficients[c] * px[x][i] * py[y][j] * pz[z][k];
                            c += 1;
                        }
                    }
                }
                out[idx] = (src[idx] as f64 * poly.exp()) as f32;
                idx += 1;
            }
        }
    }
    Ok(volume.with_f32_data(out).expect("same dims"))
}

/// Image-domain ghosting: weighted average of the original and each rigidly
/// transformed copy. Weights cover the original first and must sum to 1;
/// omitted weights mean uniform.
pub fn apply_motion(
    volume: &Volume,
    movements: &[([f64; 3], [f64; 3])],
    weights: Option<&[f64]>,
) -> Result<Volume, AugmentError> {
    let Some(src) = volume.as_f32() else {
        return Err(AugmentError::MotionOnLabels);
    };
    let uniform = vec![1.0 / (movements.len() + 1) as f64; movements.len() + 1];
    let w = weights.unwrap_or(&uniform);
    if w.len() != movements.len() + 1 || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(AugmentError::BadWeights {
            movements: movements.len(),
            found: w.to_vec(),
        });
    }
    let mut acc: Vec<f64> = src.iter().map(|&v| w[0] * v as f64).collect();
    for (m, (rot, trans)) in movements.iter().enumerate() {
        let params = AffineParams {
            rotation: *rot,
            scale: [1.0; 3],
            translation: *trans,
        };
        let moved = apply_affine(volume, &params, Interpolation::Trilinear)?;
        for (a, &v) in acc.iter_mut().zip(moved.as_f32().unwrap()) {
            *a += w[m + 1] * v as f64;
        }
    }
    Ok(volume
        .with_f32_data(acc.iter().map(|&v| v as f32).collect())
        .expect("same dims"))
}

fn draw_affine(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AffineParams {
    let r = cfg.rotation_deg.to_radians();
    AffineParams {
        rotation: [
            rng.random_range(-r..=r),
            rng.random_range(-r..=r),
            rng.random_range(-r..=r),
        ],
        scale: [
            rng.random_range(cfg.scale_range.0..=cfg.scale_range.1),
            rng.random_range(cfg.scale_range.0..=cfg.scale_range.1),
            rng.random_range(cfg.scale_range.0..=cfg.scale_range.1),
        ],
        translation: [
            rng.random_range(-cfg.translation_vox..=cfg.translation_vox),
            rng.random_range(-cfg.translation_vox..=cfg.translation_vox),
            rng.random_range(-cfg.translation_vox..=cfg.translation_vox),
        ],
    }
}

/// One unconditional affine draw from the configured ranges; the fine-tune
/// loop uses this for the augmented duplicate of every sample.
pub fn draw_affine_params(cfg: &AugmentConfig, seed: u64) -> AffineParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_affine(cfg, &mut rng)
}

/// Draws which transforms fire and their parameters, in the fixed order
/// affine, blur, noise, bias, motion.
pub fn draw_plan(cfg: &AugmentConfig, seed: u64) -> AugmentPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = AugmentPlan::default();
    if cfg.affine.enabled && rng.random_bool(cfg.affine.prob) {
        plan.affine = Some(draw_affine(cfg, &mut rng));
    }
    if cfg.blur.enabled && rng.random_bool(cfg.blur.prob) {
        let s = rng.random_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1);
        plan.blur = Some([s; 3]);
    }
    if cfg.noise.enabled && rng.random_bool(cfg.noise.prob) {
        let s = rng.random_range(cfg.noise_sigma_range.0..=cfg.noise_sigma_range.1);
        plan.noise = Some((s, rng.random()));
    }
    if cfg.bias.enabled && rng.random_bool(cfg.bias.prob) {
        let n = bias_coefficient_count(cfg.bias_order);
        let c = cfg.bias_coeff_range;
        let coeffs = (0..n).map(|_| rng.random_range(-c..=c)).collect();
        plan.bias = Some((coeffs, cfg.bias_order));
    }
    if cfg.motion.enabled && rng.random_bool(cfg.motion.prob) {
        let n = rng.random_range(cfg.motion_movements.0..=cfg.motion_movements.1);
        let r = cfg.motion_rotation_deg.to_radians();
        let t = cfg.motion_translation_vox;
        let movements = (0..n)
            .map(|_| {
                (
                    [
                        rng.random_range(-r..=r),
                        rng.random_range(-r..=r),
                        rng.random_range(-r..=r),
                    ],
                    [
                        rng.random_range(-t..=t),
                        rng.random_range(-t..=t),
                        rng.random_range(-t..=t),
                    ],
                )
            })
            .collect();
        let weights = vec![1.0 / (n + 1) as f64; n + 1];
        plan.motion = Some(MotionParams { movements, weights });
    }
    plan
}

/// Index of the heaviest motion copy; 0 is the untransformed original.
fn dominant_movement(motion: &MotionParams) -> usize {
    let mut best = 0;
    for (i, &w) in motion.weights.iter().enumerate() {
        if w > motion.weights[best] {
            best = i;
        }
    }
    best
}

/// Applies a drawn plan: spatial transforms move intensity (trilinear) and
/// labels (nearest) identically; intensity-only transforms leave labels
/// untouched. Labels follow the dominant motion copy since a label map
/// cannot be averaged.
pub fn apply_plan(
    volume: &Volume,
    labels: Option<&Volume>,
    plan: &AugmentPlan,
) -> Result<(Volume, Option<Volume>), AugmentError> {
    let mut img = volume.clone();
    let mut lab = labels.cloned();
    if let Some(affine) = &plan.affine {
        img = apply_affine(&img, affine, Interpolation::Trilinear)?;
        if let Some(l) = lab.take() {
            lab = Some(apply_affine(&l, affine, Interpolation::Nearest)?);
        }
    }
    if let Some(sigma) = plan.blur {
        img = gaussian_blur(&img, sigma)?;
    }
    if let Some((sigma, seed)) = plan.noise {
        img = add_gaussian_noise(&img, sigma, seed)?;
    }
    if let Some((coeffs, order)) = &plan.bias {
        img = apply_bias_field(&img, coeffs, *order)?;
    }
    if let Some(motion) = &plan.motion {
        img = apply_motion(&img, &motion.movements, Some(&motion.weights))?;
        let dom = dominant_movement(motion);
        if dom > 0 {
            if let Some(l) = lab.take() {
                let (rot, trans) = motion.movements[dom - 1];
                let params = AffineParams {
                    rotation: rot,
                    scale: [1.0; 3],
                    translation: trans,
                };
                lab = Some(apply_affine(&l, &params, Interpolation::Nearest)?);
            }
        }
    }
    Ok((img, lab))
}

/// Draws a plan and applies it; the public one-call corruption entry point.
pub fn sample_and_apply(
    volume: &Volume,
    labels: Option<&Volume>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Volume, Option<Volume>), AugmentError> {
    let plan = draw_plan(cfg, seed);
    apply_plan(volume, labels, &plan)
}

/// A pretext training example: the corrupted input, the spatially aligned
/// clean reconstruction target, and the matching label map when one exists.
#[derive(Debug, Clone)]
pub struct PretextTriplet {
    pub input: Volume,
    pub rec_target: Volume,
    pub labels: Option<Volume>,
}

/// Builds the pretext triplet: the reconstruction target follows every
/// spatial transform (affine, dominant motion copy) but skips the intensity
/// corruptions, so the decoder's target stays clean and aligned with the
/// labels.
pub fn sample_pretext(
    intensity: &Volume,
    labels: Option<&Volume>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<PretextTriplet, AugmentError> {
    let plan = draw_plan(cfg, seed);
    let mut img = intensity.clone();
    let mut lab = labels.cloned();
    if let Some(affine) = &plan.affine {
        img = apply_affine(&img, affine, Interpolation::Trilinear)?;
        if let Some(l) = lab.take() {
            lab = Some(apply_affine(&l, affine, Interpolation::Nearest)?);
        }
    }
    let mut rec_target = img.clone();
    if let Some(sigma) = plan.blur {
        img = gaussian_blur(&img, sigma)?;
    }
    if let Some((sigma, seed)) = plan.noise {
        img = add_gaussian_noise(&img, sigma, seed)?;
    }
    if let Some((coeffs, order)) = &plan.bias {
        img = apply_bias_field(&img, coeffs, *order)?;
    }
    if let Some(motion) = &plan.motion {
        img = apply_motion(&img, &motion.movements, Some(&motion.weights))?;
        let dom = dominant_movement(motion);
        if dom > 0 {
            let (rot, trans) = motion.movements[dom - 1];
            let params = AffineParams {
                rotation: rot,
                scale: [1.0; 3],
                translation: trans,
            };
            rec_target = apply_affine(&rec_target, &params, Interpolation::Trilinear)?;
            if let Some(l) = lab.take() {
                lab = Some(apply_affine(&l, &params, Interpolation::Nearest)?);
            }
        }
    }
    Ok(PretextTriplet {
        input: img,
        rec_target,
        labels: lab,
    })
}
