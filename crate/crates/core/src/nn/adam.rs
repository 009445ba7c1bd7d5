use super::{NnError, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_learning_rate(1e-3)
    }
}

/// Moment accumulators for one parameter list. Accumulators are created
/// lazily on the first update and mirror the parameter shapes afterwards.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, first: Vec::new(), second: Vec::new(), step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }
}

/// Bias-corrected Adam step applied in place. Gradients are validated before
/// any parameter is touched, so a non-finite gradient leaves the model intact.
pub fn adam_update<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::shape("adam_update", format!("{} gradients", params.len()), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(NnError::shape("adam_update", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
        if !g.all_finite() {
            return Err(NnError::Divergence { what: format!("gradient of parameter {i}") });
        }
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| p.zeros_like()).collect();
        state.second = params.iter().map(|p| p.zeros_like()).collect();
    } else if state.first.len() != params.len() || state.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(NnError::shape("adam_update", "parameter list seen at first step", "different layout"));
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.learning_rate), T::lit(cfg.epsilon));
    let one = T::one();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.first.iter_mut().zip(state.second.iter_mut())) {
        for (((w, &gi), mi), vi) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
