use crate::config::TrainConfig;
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    /// First and second moments per parameter, in canonical order.
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams<Tensor>, config: &TrainConfig) -> Self {
        let mut zeros = Vec::new();
        params.for_each(|_, t| zeros.push(vec![0.0; t.numel()]));
        AdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients stored on `params`. Parameters whose
    /// name satisfies `frozen` are left untouched.
    pub fn step(&mut self, params: &mut ModelParams<Tensor>, frozen: impl Fn(&str) -> bool) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut idx = 0;
        params.for_each_mut(|name, t| {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            idx += 1;
            if frozen(name) {
                return;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { return };
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= self.lr * (update + self.weight_decay * *p);
            }
        });
        params.zero_padding_row();
    }
}
