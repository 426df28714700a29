//! Adam optimizer and EMA shadow parameters.

use crate::error::{Error, Result};
use crate::params::SharedTensor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Slots follow the parameter list order given
/// at construction; `step` consumes (and thereby resets) each parameter's
/// gradient, treating an absent gradient as zero.
pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<Slot>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[(String, SharedTensor)]) -> Self {
        let slots = params
            .iter()
            .map(|(_, h)| {
                let n = h.borrow().numel();
                Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self { cfg, slots, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the same parameter list the optimizer was built for.
    /// Returns the global gradient L2 norm.
    pub fn step(&mut self, params: &[(String, SharedTensor)]) -> Result<f64> {
        if params.len() != self.slots.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameters, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut grad_sq = 0.0;
        for ((_, handle), slot) in params.iter().zip(self.slots.iter_mut()) {
            let mut p = handle.borrow_mut();
            let grad = p.take_grad();
            let data = p.data_mut();
            match grad {
                Some(g) => {
                    for i in 0..data.len() {
                        grad_sq += g[i] * g[i];
                        slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g[i];
                        slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mh = slot.m[i] / bc1;
                        let vh = slot.v[i] / bc2;
                        data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                    }
                }
                None => {
                    // Zero gradient this step: moments decay, update follows.
                    for i in 0..data.len() {
                        slot.m[i] *= c.beta1;
                        slot.v[i] *= c.beta2;
                        let mh = slot.m[i] / bc1;
                        let vh = slot.v[i] / bc2;
                        data[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(grad_sq.sqrt())
    }

    /// Moment vectors as named tensors for checkpointing.
    pub fn state(&self, params: &[(String, SharedTensor)]) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for ((name, handle), slot) in params.iter().zip(&self.slots) {
            let shape = handle.borrow().shape().to_vec();
            out.push((
                format!("opt.m.{name}"),
                Tensor::from_vec(shape.clone(), slot.m.clone()).expect("moment is finite"),
            ));
            out.push((
                format!("opt.v.{name}"),
                Tensor::from_vec(shape, slot.v.clone()).expect("moment is finite"),
            ));
        }
        out
    }

    /// Restore moments saved by [`state`]. Missing names keep zeros.
    pub fn load_state(
        &mut self,
        params: &[(String, SharedTensor)],
        saved: &[(String, Tensor)],
        t: u64,
    ) -> Result<()> {
        for ((name, _), slot) in params.iter().zip(self.slots.iter_mut()) {
            for (key, dst) in [(format!("opt.m.{name}"), &mut slot.m), (format!("opt.v.{name}"), &mut slot.v)] {
                if let Some((_, tensor)) = saved.iter().find(|(n, _)| *n == key) {
                    if tensor.numel() != dst.len() {
                        return Err(Error::Integrity(format!("moment size mismatch for {key}")));
                    }
                    dst.copy_from_slice(tensor.data());
                }
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Exponential moving average: shadow = decay * shadow + (1 - decay) * param.
/// At decay 0 the shadow tracks the parameters exactly.
pub struct Ema {
    decay: f64,
    shadow: Vec<(String, Tensor)>,
}

impl Ema {
    pub fn new(decay: f64, params: &[(String, SharedTensor)]) -> Self {
        let shadow = params
            .iter()
            .map(|(n, h)| {
                let mut t = h.borrow().clone();
                t.reset_grad();
                t.set_requires_grad(false);
                (n.clone(), t)
            })
            .collect();
        Self { decay, shadow }
    }

    pub fn update(&mut self, params: &[(String, SharedTensor)]) {
        for ((_, shadow), (_, handle)) in self.shadow.iter_mut().zip(params) {
            let p = handle.borrow();
            for (s, &x) in shadow.data_mut().iter_mut().zip(p.data()) {
                *s = self.decay * *s + (1.0 - self.decay) * x;
            }
        }
    }

    pub fn shadow(&self) -> &[(String, Tensor)] {
        &self.shadow
    }

    pub fn restore(&mut self, saved: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in &mut self.shadow {
            if let Some((_, s)) = saved.iter().find(|(n, _)| n == name) {
                if s.numel() != t.numel() {
                    return Err(Error::Integrity(format!("ema size mismatch for {name}")));
                }
                t.data_mut().copy_from_slice(s.data());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::shared;

    /// Reference scalar Adam, written independently of the vector path.
    fn reference_adam(theta0: f64, grads: &[f64], cfg: AdamConfig) -> f64 {
        let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            theta -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        theta
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = AdamConfig::default();
        let p = shared(Tensor::from_vec(vec![1], vec![1.5]).unwrap().with_grad());
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = Adam::new(cfg, &params);
        let grads = [0.3, -0.7, 0.1, 0.9, -0.2, 0.05];
        for &g in &grads {
            p.borrow_mut().install_grad(vec![g]).unwrap();
            opt.step(&params).unwrap();
        }
        let expected = reference_adam(1.5, &grads, cfg);
        let actual = p.borrow().data()[0];
        assert!((actual - expected).abs() < 1e-12, "{actual} vs {expected}");
    }

    #[test]
    fn missing_grad_is_zero_grad() {
        let cfg = AdamConfig::default();
        let p = shared(Tensor::from_vec(vec![1], vec![2.0]).unwrap().with_grad());
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = Adam::new(cfg, &params);
        // No gradient ever: moments stay zero, parameter stays put.
        for _ in 0..5 {
            opt.step(&params).unwrap();
        }
        assert_eq!(p.borrow().data()[0], 2.0);
    }

    #[test]
    fn ema_decay_zero_tracks_params() {
        let p = shared(Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap().with_grad());
        let params = vec![("p".to_string(), p.clone())];
        let mut ema = Ema::new(0.0, &params);
        p.borrow_mut().data_mut()[0] = 5.0;
        ema.update(&params);
        assert_eq!(ema.shadow()[0].1.data(), p.borrow().data());
    }

    #[test]
    fn ema_moves_slowly_at_high_decay() {
        let p = shared(Tensor::from_vec(vec![1], vec![0.0]).unwrap().with_grad());
        let params = vec![("p".to_string(), p.clone())];
        let mut ema = Ema::new(0.9, &params);
        p.borrow_mut().data_mut()[0] = 1.0;
        ema.update(&params);
        assert!((ema.shadow()[0].1.data()[0] - 0.1).abs() < 1e-12);
    }
}
