//! ADAM with bias correction. Moments are stored as f32 (so they round-trip
//! through checkpoints bit-exactly); the per-element update is evaluated in
//! f64 before rounding back.

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    /// State sized for `params`, with the canonical defaults
    /// lr 1e-4, beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState::with_hyperparams(params, 1e-4, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(params: &[Tensor], lr: f32, beta1: f32, beta2: f32, epsilon: f32) -> AdamState {
        assert!(lr > 0.0 && epsilon > 0.0, "lr and epsilon must be positive");
        assert!((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        AdamState {
            step_count: 0,
            lr,
            beta1,
            beta2,
            epsilon,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One in-place ADAM update. Gradients must be populated and are left
/// untouched; the caller clears them between steps.
pub fn adam_step(params: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(TensorError::Invalid(format!(
            "optimizer state covers {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    // Validate everything before mutating anything.
    let mut grads = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let g = p.grad().ok_or_else(|| TensorError::MissingGrad(format!("parameter {i}")))?;
        if g.len() != state.first_moment[i].len() {
            return Err(TensorError::DimMismatch { expected: vec![state.first_moment[i].len()], got: vec![g.len()] });
        }
        grads.push(g);
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1 as f64, state.beta2 as f64);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = state.lr as f64;
    let eps = state.epsilon as f64;
    for (i, p) in params.iter().enumerate() {
        let g = &grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let mut data = p.to_vec();
        for j in 0..g.len() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            let mj = m[j] as f64;
            v[j] = vj as f32;
            let vj = v[j] as f64;
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
            data[j] = (data[j] as f64 - update) as f32;
        }
        p.set_data(&data)?;
    }
    Ok(())
}
