use super::{Float, ParamStore};
use crate::error::{Error, Result};

/// A first-order update rule applied to every trainable parameter.
pub trait Optimizer<T: Float>: Send + std::fmt::Debug {
    fn name(&self) -> &'static str;

    /// Applies one update with learning rate `lr` using the accumulated
    /// gradients. Nothing is modified if any gradient is non-finite.
    fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()>;
}

fn check_finite<T: Float>(params: &ParamStore<T>) -> Result<()> {
    for p in params.iter().filter(|p| p.trainable()) {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

/// SGD with classic (coupled) L2 weight decay and heavy-ball momentum:
/// `d = g + wd * theta; buf = mu * buf + d; theta -= lr * buf`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub weight_decay: f64,
    pub momentum: f64,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(weight_decay: f64, momentum: f64) -> Self {
        Sgd {
            weight_decay,
            momentum,
            buffers: Vec::new(),
        }
    }
}

/// One SGD update on a single value; the free-function form used by tests
/// and by [`Sgd::step`].
pub fn sgd_update(theta: f64, grad: f64, lr: f64, weight_decay: f64, buf: Option<&mut f64>, momentum: f64) -> f64 {
    let d = grad + weight_decay * theta;
    let v = match buf {
        Some(b) => {
            *b = momentum * *b + d;
            *b
        }
        None => d,
    };
    theta - lr * v
}

impl<T: Float> Optimizer<T> for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        check_finite(params)?;
        if self.buffers.len() != params.len() {
            self.buffers = vec![None; params.len()];
        }
        for (p, slot) in params.iter_mut().zip(self.buffers.iter_mut()) {
            if !p.trainable() {
                continue;
            }
            if self.momentum != 0.0 && slot.is_none() {
                *slot = Some(vec![0.0; p.grad.len()]);
            }
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let theta = values[i].as_f64();
                let buf = slot.as_mut().map(|b| &mut b[i]);
                let updated = sgd_update(theta, p.grad[i], lr, self.weight_decay, buf, self.momentum);
                values[i] = T::lit(updated);
            }
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            weight_decay,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl<T: Float> Optimizer<T> for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        check_finite(params)?;
        if self.moments.len() != params.len() {
            self.moments = vec![None; params.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, slot) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !p.trainable() {
                continue;
            }
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; p.grad.len()], vec![0.0; p.grad.len()]));
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mut theta = values[i].as_f64();
                theta -= lr * self.weight_decay * theta;
                theta -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                values[i] = T::lit(theta);
            }
        }
        Ok(())
    }
}
