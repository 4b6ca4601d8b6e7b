use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GradientBundle;
use crate::real::Real;

/// Exponential decay from `lr_initial` to `lr_final` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn constant(lr: f64, total_steps: usize) -> Self {
        Schedule {
            lr_initial: lr,
            lr_final: lr,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial >= self.lr_final && self.lr_final > 0.0) {
            return Err(Error::Config(format!(
                "schedule needs lr_initial >= lr_final > 0, got {} -> {}",
                self.lr_initial, self.lr_final
            )));
        }
        Ok(())
    }
}

pub fn lr_at_step(schedule: &Schedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::OutOfRange(format!(
            "step {step} beyond schedule length {}",
            schedule.total_steps
        )));
    }
    if schedule.total_steps == 0 {
        return Ok(schedule.lr_initial);
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(schedule.lr_initial * (schedule.lr_final / schedule.lr_initial).powf(frac))
}

/// Rescales the whole bundle to `max_norm` when its global L2 norm exceeds it.
pub fn clip_gradients<T: Real>(mut bundle: GradientBundle<T>, max_norm: f64) -> GradientBundle<T> {
    assert!(max_norm > 0.0, "clip norm must be positive");
    let norm = bundle.norm();
    if norm > max_norm {
        bundle.scale(T::of(max_norm / norm));
    }
    bundle
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Dense Adam moments for one flat variable buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            hyper,
        }
    }
}

#[inline]
fn adam_update<T: Real>(
    x: &mut T,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    h: &AdamHyper,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
    let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + h.eps);
    *x = T::of(x.f64() - update);
}

/// One bias-corrected Adam step.
pub fn adam_step<T: Real>(
    state: &mut AdamState,
    variables: &mut [T],
    gradients: &[T],
    lr: f64,
) -> Result<()> {
    if variables.len() != gradients.len() || variables.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "adam: {} variables, {} gradients, {} moments",
            variables.len(),
            gradients.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.step_count as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step_count as i32);
    for i in 0..variables.len() {
        let g = gradients[i].f64();
        if g == 0.0 && state.first_moment[i] == 0.0 && state.second_moment[i] == 0.0 {
            continue;
        }
        adam_update(
            &mut variables[i],
            g,
            &mut state.first_moment[i],
            &mut state.second_moment[i],
            &h,
            lr,
            bc1,
            bc2,
        );
    }
    Ok(())
}

/// Adam over the rows of a latent table where only rows with a gradient
/// are stepped; each row keeps its own step count for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdam {
    pub dim: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub row_steps: Vec<u64>,
    pub hyper: AdamHyper,
}

impl SparseAdam {
    pub fn new(rows: usize, dim: usize, hyper: AdamHyper) -> Self {
        SparseAdam {
            dim,
            first_moment: vec![0.0; rows * dim],
            second_moment: vec![0.0; rows * dim],
            row_steps: vec![0; rows],
            hyper,
        }
    }

    pub fn step_row<T: Real>(&mut self, row: usize, values: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(values.len(), self.dim);
        assert_eq!(grad.len(), self.dim);
        self.row_steps[row] += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.row_steps[row] as i32);
        let bc2 = 1.0 - h.beta2.powi(self.row_steps[row] as i32);
        let base = row * self.dim;
        for k in 0..self.dim {
            adam_update(
                &mut values[k],
                grad[k].f64(),
                &mut self.first_moment[base + k],
                &mut self.second_moment[base + k],
                &h,
                lr,
                bc1,
                bc2,
            );
        }
    }
}
