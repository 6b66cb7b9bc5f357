//! Shared test utilities: RNG helpers and the central finite-difference
//! gradient oracle. The oracle only consumes the public forward API and the
//! exact f64 scalar readout, staying independent of the backward pass it
//! checks.

#![allow(dead_code)]

use bapm_core::tensor::{Tape, TensorId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform magnitudes in [0.1, 1] with random sign; keeps values away from
/// the PReLU/L1 kinks so central differences stay two-sided.
pub fn uniform_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..1.0f32);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>, // (param, index, analytic, numeric)
}

const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-4;

/// Central finite differences with h = 1e-2 * max(1, |theta|) against the
/// tape's backward pass. `build` must rebuild the same graph from leaf ids.
/// Checks up to `max_probes_per_param` randomly chosen elements per tensor
/// (0 = every element).
///
/// A probe passes on relative error < 1e-3, or on absolute error below a
/// floor of 1e-3 times the largest analytic gradient in the same tensor
/// (min 1e-4). The floor absorbs f32 forward-rounding noise on components
/// far below the tensor's gradient scale; formula bugs distort the large
/// components and stay detectable.
pub fn gradcheck<F>(
    params: &[(Vec<f32>, Vec<usize>)],
    build: F,
    max_probes_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let register = |tape: &mut Tape, values: &[(Vec<f32>, Vec<usize>)], rg: bool| -> Vec<TensorId> {
        values
            .iter()
            .map(|(data, shape)| tape.leaf(data.clone(), shape, rg).unwrap())
            .collect()
    };

    let mut tape = Tape::new();
    let ids = register(&mut tape, params, true);
    let loss = build(&mut tape, &ids);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(params)
        .map(|(&id, (data, _))| tape.grad(id).map_or(vec![0.0; data.len()], |g| g.to_vec()))
        .collect();

    let eval = |values: &[(Vec<f32>, Vec<usize>)]| -> f64 {
        let mut tape = Tape::new();
        let ids = register(&mut tape, values, false);
        let loss = build(&mut tape, &ids);
        tape.scalar_f64(loss)
            .expect("gradcheck loss must be a scalar reduction with an f64 readout")
    };

    let mut report = GradCheckReport {
        probes: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<(Vec<f32>, Vec<usize>)> = params.to_vec();
    for p in 0..params.len() {
        let len = params[p].0.len();
        let indices: Vec<usize> = if max_probes_per_param == 0 || len <= max_probes_per_param {
            (0..len).collect()
        } else {
            (0..max_probes_per_param)
                .map(|_| rng.random_range(0..len))
                .collect()
        };
        let gmax = analytic[p]
            .iter()
            .fold(0.0f64, |acc, &g| acc.max((g as f64).abs()));
        let floor = ABS_FLOOR.max(1e-3 * gmax);
        for idx in indices {
            let theta = params[p].0[idx] as f64;
            let a = analytic[p][idx] as f64;
            // Base step per the h = 1e-2 * max(1, |theta|) rule. A central
            // difference is only a derivative estimate when the probed
            // interval is one-sided smooth; activation kinks (PReLU, |.|)
            // inside +-h invalidate the sample, so a failing probe retries
            // with a finer step before it counts as a mismatch.
            let h0 = 1e-2 * theta.abs().max(1.0);
            let mut best_rel = f64::INFINITY;
            let mut best_numeric = f64::NAN;
            for shrink in [1.0, 0.25, 0.0625, 1.0 / 64.0, 1.0 / 256.0] {
                let h = h0 * shrink;
                work[p].0[idx] = (theta + h) as f32;
                let up = eval(&work);
                work[p].0[idx] = (theta - h) as f32;
                let down = eval(&work);
                work[p].0[idx] = theta as f32;
                let numeric = (up - down) / (2.0 * h);
                let abs_err = (a - numeric).abs();
                let rel = if abs_err <= floor {
                    0.0
                } else {
                    abs_err / a.abs().max(numeric.abs()).max(1e-12)
                };
                if rel < best_rel {
                    best_rel = rel;
                    best_numeric = numeric;
                }
                if rel < REL_TOL {
                    break;
                }
            }
            report.probes += 1;
            if best_rel > report.max_rel_err {
                report.max_rel_err = best_rel;
                report.worst = Some((p, idx, a, best_numeric));
            }
        }
    }
    report
}

pub fn assert_gradcheck(report: &GradCheckReport, what: &str) {
    assert!(
        report.max_rel_err < REL_TOL,
        "{what}: max relative gradient error {:.3e} over {} probes (worst {:?})",
        report.max_rel_err,
        report.probes,
        report.worst
    );
}
