//! Adam with decoupled weight decay, plus the cosine learning-rate schedule.

/// Cosine annealing from `start` at step 0 to `end` at step `total - 1`.
pub fn cosine_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let progress = step as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay over one flat parameter vector.
///
/// Decay is applied directly to the parameters (not mixed into the moment
/// estimates) and can be masked off per entry, which the model trainer uses
/// to exempt biases and layer-norm parameters.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, decay_mask: Option<&[bool]>) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let decay = match decay_mask {
                Some(mask) if !mask[i] => 0.0,
                _ => self.weight_decay,
            };
            params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * params[i]);
        }
    }
}
