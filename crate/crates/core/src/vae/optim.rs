use serde::Serialize;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TemperatureSchedule {
    Constant(f64),
    /// Every `m`-th step (counting from 0) at `low`, all others at `mid`.
    Mixed {
        m: usize,
        mid: f64,
        low: f64,
    },
}

impl TemperatureSchedule {
    pub fn label(&self) -> String {
        match self {
            TemperatureSchedule::Constant(_) => "constant".into(),
            TemperatureSchedule::Mixed { m, mid, low } => format!("mixed({m};{mid};{low})"),
        }
    }

    /// Temperature reported for evaluation (the low one for mixed runs).
    pub fn test_temperature(&self) -> f64 {
        match *self {
            TemperatureSchedule::Constant(t) => t,
            TemperatureSchedule::Mixed { low, .. } => low,
        }
    }
}

pub fn temperature_schedule(step: usize, schedule: &TemperatureSchedule) -> f64 {
    match *schedule {
        TemperatureSchedule::Constant(t) => t,
        TemperatureSchedule::Mixed { m, mid, low } => {
            if step.is_multiple_of(m.max(1)) {
                low
            } else {
                mid
            }
        }
    }
}
