//! Bias-corrected Adam updates over named parameter buffers.

use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Single bias-corrected Adam update for one parameter buffer.
/// `t` is the 1-based step count after this update.
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    hyper: AdamHyper,
) {
    let b1 = hyper.beta1 as f64;
    let b2 = hyper.beta2 as f64;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = hyper.lr as f64 * (mi / bc1) / ((vi / bc2).sqrt() + hyper.eps as f64);
        param[i] -= update as f32;
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state keyed by parameter name; parameters that never submit a
/// gradient (frozen ones) are never touched.
pub struct Adam {
    pub hyper: AdamHyper,
    states: BTreeMap<String, Moments>,
    step: u64,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Adam {
            hyper,
            states: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update across all (name, param, grad) triples.
    pub fn step<'a, I>(&mut self, triples: I)
    where
        I: IntoIterator<Item = (&'a str, &'a mut [f32], &'a [f32])>,
    {
        self.step += 1;
        for (name, param, grad) in triples {
            let state = self.states.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; param.len()],
                v: vec![0.0; param.len()],
            });
            adam_step(param, grad, &mut state.m, &mut state.v, self.step, self.hyper);
        }
    }
}
