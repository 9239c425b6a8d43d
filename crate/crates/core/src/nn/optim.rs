use super::{NnError, Result, Scalar, Tensor};

/// Adam hyper-parameters. Weight decay is decoupled from the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }
}

/// A named trainable tensor with its gradient slot and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.len();
        Parameter { name: name.into(), value, grad: None, m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        let conv = |xs: &[T]| xs.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.as_deref().map(conv),
            m: conv(&self.m),
            v: conv(&self.v),
            step: self.step,
        }
    }
}

/// One decoupled-weight-decay Adam update: `p <- p - lr*wd*p`, then the
/// bias-corrected moment step.
pub fn adam_step<T: Scalar>(p: &mut Parameter<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let grad = p.grad.as_ref().ok_or_else(|| NnError::MissingGradient(p.name.clone()))?;
    if grad.len() != p.value.len() {
        return Err(super::shape_err("adam_step", format!("gradient of {} has {} values", p.name, grad.len())));
    }
    p.step += 1;
    let t = p.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let corr1 = T::of(1.0 - cfg.beta1.powi(t));
    let corr2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr_t = T::of(lr);
    let decay = T::of(lr * cfg.weight_decay);
    let eps = T::of(cfg.eps);
    for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(p.m.iter_mut()).zip(p.v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * *g;
        *v = b2 * *v + (T::one() - b2) * *g * *g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *w -= decay * *w;
        *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
