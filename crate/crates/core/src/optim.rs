//! AdamW with decoupled weight decay, operating over the flat parameter
//! buffers produced by the network visitors.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First/second moment buffers mirroring one parameter list, plus the shared
/// step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(sizes: &[usize]) -> Self {
        OptimState {
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }
}

/// One AdamW update of a single parameter tensor:
/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; bias-corrected m_hat, v_hat;
/// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta).
/// `step` is the 1-based step count after this update.
pub fn adamw_update(
    theta: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamWConfig,
) {
    assert_eq!(theta.len(), grad.len(), "parameter/gradient length mismatch");
    assert_eq!(theta.len(), m.len(), "parameter/moment length mismatch");
    assert_eq!(theta.len(), v.len(), "parameter/moment length mismatch");
    assert!(step >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let t = theta[i] as f64;
        theta[i] = (t - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * t)) as f32;
    }
}

/// Apply one step across a whole parameter list; `params[i]` pairs with
/// `grads[i]` and the i-th moment buffers.
pub fn adamw_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut OptimState,
    cfg: &AdamWConfig,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    assert_eq!(params.len(), state.m.len(), "parameter/state count mismatch");
    state.step += 1;
    for i in 0..params.len() {
        adamw_update(params[i], grads[i], &mut state.m[i], &mut state.v[i], state.step, cfg);
    }
}
