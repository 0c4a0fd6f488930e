use std::sync::Arc;

use super::TrainError;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[Arc<Tensor<T>>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step<T: Scalar>(
    params: &mut [Arc<Tensor<T>>],
    grads: &[Tensor<T>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(TrainError::Shape(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = Arc::make_mut(p).data_mut();
        for (j, (x, gj)) in data.iter_mut().zip(g.data()).enumerate() {
            let gj = gj.to_f64_lossy();
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let delta = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
            *x = T::from_f64_lossy(x.to_f64_lossy() - delta);
        }
    }
    Ok(())
}
