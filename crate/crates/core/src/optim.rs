//! Bias-corrected Adam over flat parameter buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators for one parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Keeps rows (of `stride` entries) whose flag is set.
    pub fn retain_rows(&mut self, stride: usize, keep: &[bool]) {
        let filter = |buf: &mut Vec<f64>| {
            let mut out = Vec::with_capacity(buf.len());
            for (row, &k) in buf.chunks_exact(stride).zip(keep) {
                if k {
                    out.extend_from_slice(row);
                }
            }
            *buf = out;
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }

    /// Appends zero-initialized moments for `rows` new rows.
    pub fn push_zero_rows(&mut self, stride: usize, rows: usize) {
        self.m.resize(self.m.len() + stride * rows, 0.0);
        self.v.resize(self.v.len() + stride * rows, 0.0);
    }
}

/// One Adam update of `params` in place. `group` names the parameter group in
/// error messages.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, group: &str) -> Result<()> {
    if params.len() != grads.len() || state.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "group `{group}`: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            group: group.to_string(),
            what: "gradient",
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

/// Exponential interpolation from `start` to `end` over `[0, total]`.
pub fn exp_decay(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total == 0 || start <= 0.0 || end <= 0.0 {
        return start;
    }
    let t = (step as f64 / total as f64).clamp(0.0, 1.0);
    (start.ln() * (1.0 - t) + end.ln() * t).exp()
}
