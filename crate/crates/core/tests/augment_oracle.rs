//! Pointwise oracles for the resampling and intensity transforms.

mod util;

use bapm_core::augment::{
    apply_affine, apply_bias_field, add_gaussian_noise, bias_coefficient_count, draw_plan,
    sample_and_apply, AffineParams, AugmentConfig, Interpolation,
};
use bapm_core::volume::Volume;
use util::{rng, uniform};

/// Independent trilinear resampler: recomputes the inverse-mapped source
/// coordinate from scratch and gathers the 8 corners directly.
fn oracle_affine(vol: &Volume, p: &AffineParams) -> Vec<f32> {
    let dims = vol.dims;
    let data = vol.as_f32().unwrap();
    let c = [
        (dims[0] as f64 - 1.0) / 2.0,
        (dims[1] as f64 - 1.0) / 2.0,
        (dims[2] as f64 - 1.0) / 2.0,
    ];
    let (sx, cx) = p.rotation[0].sin_cos();
    let (sy, cy) = p.rotation[1].sin_cos();
    let (sz, cz) = p.rotation[2].sin_cos();
    // forward R = Rz Ry Rx written out elementwise
    let r = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ];
    let mut out = vec![0.0f32; data.len()];
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = [
                    x as f64 - c[0] - p.translation[0],
                    y as f64 - c[1] - p.translation[1],
                    z as f64 - c[2] - p.translation[2],
                ];
                // inverse: S^-1 R^T v + c
                let src = [
                    (r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2]) / p.scale[0] + c[0],
                    (r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2]) / p.scale[1] + c[1],
                    (r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2]) / p.scale[2] + c[2],
                ];
                let f = [src[0].floor(), src[1].floor(), src[2].floor()];
                let t = [src[0] - f[0], src[1] - f[1], src[2] - f[2]];
                let mut acc = 0.0f64;
                for dz in 0..2i64 {
                    for dy in 0..2i64 {
                        for dx in 0..2i64 {
                            let (xi, yi, zi) =
                                (f[0] as i64 + dx, f[1] as i64 + dy, f[2] as i64 + dz);
                            if xi < 0
                                || yi < 0
                                || zi < 0
                                || xi >= dims[0] as i64
                                || yi >= dims[1] as i64
                                || zi >= dims[2] as i64
                            {
                                continue;
                            }
                            let w = (if dx == 0 { 1.0 - t[0] } else { t[0] })
                                * (if dy == 0 { 1.0 - t[1] } else { t[1] })
                                * (if dz == 0 { 1.0 - t[2] } else { t[2] });
                            acc += w
                                * data[xi as usize + dims[0] * (yi as usize + dims[1] * zi as usize)]
                                    as f64;
                        }
                    }
                }
                out[idx] = acc as f32;
                idx += 1;
            }
        }
    }
    out
}

#[test]
fn random_affine_matches_trilinear_oracle() {
    let mut r = rng(51);
    for trial in 0..5 {
        let data = uniform(&mut r, 512, 0.0, 1.0);
        let vol = Volume::new_intensity([8, 8, 8], [1.0; 3], data).unwrap();
        let params = AffineParams {
            rotation: [
                r.random_range(-0.3..0.3),
                r.random_range(-0.3..0.3),
                r.random_range(-0.3..0.3),
            ],
            scale: [
                r.random_range(0.85..1.15),
                r.random_range(0.85..1.15),
                r.random_range(0.85..1.15),
            ],
            translation: [
                r.random_range(-2.0..2.0),
                r.random_range(-2.0..2.0),
                r.random_range(-2.0..2.0),
            ],
        };
        let got = apply_affine(&vol, &params, Interpolation::Trilinear).unwrap();
        let expect = oracle_affine(&vol, &params);
        for (g, e) in got.as_f32().unwrap().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-5, "trial {trial}: {g} vs {e}");
        }
    }
}

use rand::Rng;

#[test]
fn random_bias_field_matches_polynomial_oracle() {
    let mut r = rng(52);
    let data = uniform(&mut r, 343, 0.1, 1.0);
    let vol = Volume::new_intensity([7, 7, 7], [1.0; 3], data).unwrap();
    let order = 3;
    let coeffs: Vec<f64> = (0..bias_coefficient_count(order))
        .map(|_| r.random_range(-0.3..0.3))
        .collect();
    let got = apply_bias_field(&vol, &coeffs, order).unwrap();
    let src = vol.as_f32().unwrap();
    let out = got.as_f32().unwrap();
    let norm = |i: usize| 2.0 * i as f64 / 6.0 - 1.0;
    for z in 0..7 {
        for y in 0..7 {
            for x in 0..7 {
                let (u, v, w) = (norm(x), norm(y), norm(z));
                let mut poly = 0.0;
                let mut c = 0;
                for i in 0..=order {
                    for j in 0..=order - i {
                        for k in 0..=order - i - j {
                            poly += coeffs[c] * u.powi(i as i32) * v.powi(j as i32) * w.powi(k as i32);
                            c += 1;
                        }
                    }
                }
                let idx = vol.index(x, y, z);
                let expect = src[idx] as f64 * poly.exp();
                assert!((out[idx] as f64 - expect).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn noise_sample_mean_is_within_four_sigma() {
    let n = 64usize;
    let vol = Volume::new_intensity([n, n, n], [1.0; 3], vec![0.5; n * n * n]).unwrap();
    let sigma = 0.05;
    let out = add_gaussian_noise(&vol, sigma, 424242).unwrap();
    let mean: f64 = out
        .as_f32()
        .unwrap()
        .iter()
        .zip(vol.as_f32().unwrap())
        .map(|(o, i)| (o - i) as f64)
        .sum::<f64>()
        / (n * n * n) as f64;
    let bound = 4.0 * sigma / ((n * n * n) as f64).sqrt();
    assert!(mean.abs() < bound, "|{mean}| >= {bound}");
}

fn centroid_f32(vol: &Volume, pred: impl Fn(f32) -> bool) -> [f64; 3] {
    let data = vol.as_f32().unwrap();
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    let mut idx = 0;
    for z in 0..vol.dims[2] {
        for y in 0..vol.dims[1] {
            for x in 0..vol.dims[0] {
                if pred(data[idx]) {
                    acc[0] += x as f64;
                    acc[1] += y as f64;
                    acc[2] += z as f64;
                    n += 1;
                }
                idx += 1;
            }
        }
    }
    for a in acc.iter_mut() {
        *a /= n.max(1) as f64;
    }
    acc
}

fn centroid_u8(vol: &Volume, pred: impl Fn(u8) -> bool) -> [f64; 3] {
    let data = vol.as_u8().unwrap();
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    let mut idx = 0;
    for z in 0..vol.dims[2] {
        for y in 0..vol.dims[1] {
            for x in 0..vol.dims[0] {
                if pred(data[idx]) {
                    acc[0] += x as f64;
                    acc[1] += y as f64;
                    acc[2] += z as f64;
                    n += 1;
                }
                idx += 1;
            }
        }
    }
    for a in acc.iter_mut() {
        *a /= n.max(1) as f64;
    }
    acc
}

/// With only the affine enabled, the bright-region centroid of the intensity
/// volume and the foreground centroid of the label volume move together.
#[test]
fn affine_moves_intensity_and_label_centroids_consistently() {
    let n = 16usize;
    let mut img = vec![0.0f32; n * n * n];
    let mut lab = vec![0u8; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d2 = [x, y, z]
                    .iter()
                    .map(|&v| (v as f64 - 7.5).powi(2))
                    .sum::<f64>();
                if d2 < 16.0 {
                    img[x + n * (y + n * z)] = 1.0;
                    lab[x + n * (y + n * z)] = 2;
                }
            }
        }
    }
    let img = Volume::new_intensity([n, n, n], [1.0; 3], img).unwrap();
    let lab = Volume::new_labels([n, n, n], [1.0; 3], lab).unwrap();

    let mut cfg = AugmentConfig::default();
    cfg.affine.prob = 1.0;
    cfg.translation_vox = 3.0;
    for t in [&mut cfg.blur, &mut cfg.noise, &mut cfg.bias, &mut cfg.motion] {
        t.enabled = false;
    }
    for seed in 0..6u64 {
        let plan = draw_plan(&cfg, seed);
        assert!(plan.affine.is_some());
        let (img_t, lab_t) = sample_and_apply(&img, Some(&lab), &cfg, seed).unwrap();
        let ci = centroid_f32(&img_t, |v| v > 0.5);
        let cl = centroid_u8(&lab_t.unwrap(), |v| v > 0);
        let dist = (0..3)
            .map(|a| (ci[a] - cl[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 0.6, "seed {seed}: centroids {ci:?} vs {cl:?} ({dist})");
    }
}
