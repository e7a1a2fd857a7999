use crate::error::{NnError, Result};
use crate::model::{Gradients, Model};
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<Gradients<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::Invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::Invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self { lr, momentum, velocity: None })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update in place. Non-finite gradients abort without touching the model.
    pub fn step(&mut self, model: &mut Model<f32>, grads: &Gradients<f32>) -> Result<()> {
        if !grads.all_finite() {
            return Err(NnError::NonFinite("gradient".into()));
        }
        let velocity = self.velocity.get_or_insert_with(|| Gradients::zeros_like(model));
        let (lr, mu) = (self.lr as f32, self.momentum as f32);
        for ((param, grad), vel) in model
            .params_mut()
            .iter_mut()
            .zip(&grads.per_layer)
            .zip(velocity.per_layer.iter_mut())
        {
            let (Some(p), Some(g), Some(v)) = (param.as_mut(), grad.as_ref(), vel.as_mut()) else {
                continue;
            };
            update(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), lr, mu);
            update(p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), lr, mu);
        }
        Ok(())
    }
}

fn update<T: Scalar>(p: &mut [T], g: &[T], v: &mut [T], lr: T, mu: T) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}
