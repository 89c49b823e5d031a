use crate::grad::ParamStore;

/// Adam over the trainable parameters of a [`ParamStore`]; frozen
/// parameters are neither moved nor tracked.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            if self.m.len() <= i {
                self.m.resize(i + 1, Vec::new());
                self.v.resize(i + 1, Vec::new());
            }
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                m.resize(p.value.len(), 0.0);
                v.resize(p.value.len(), 0.0);
            }
            let g = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}
