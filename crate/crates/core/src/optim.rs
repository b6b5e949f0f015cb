//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub epsilon: Scalar,
    pub weight_decay: Scalar,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// First and second moment buffers, one per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    /// Zeroed moments for parameters of the given shapes.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn matches<'a>(&self, shapes: impl IntoIterator<Item = &'a [usize]>) -> bool {
        let shapes: Vec<&[usize]> = shapes.into_iter().collect();
        shapes.len() == self.m.len()
            && shapes.len() == self.v.len()
            && shapes
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(s, (m, v))| m.shape() == *s && v.shape() == *s)
    }
}

/// One Adam step over named parameters.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves parameters and state untouched.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    config: &AdamConfig,
) -> Result<()> {
    config.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(p.shape(), g.shape(), "parameter vs gradient"));
        }
        if state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::shape(p.shape(), state.m[i].shape(), "parameter vs moment"));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
        weight_decay: wd,
    } = *config;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
        }
    }
    Ok(())
}

/// Euclidean norm over all gradient elements.
pub fn global_norm(grads: &[Tensor]) -> Scalar {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<Scalar>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: Scalar) -> Result<Scalar> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::InvalidArgument(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    Ok(norm)
}
