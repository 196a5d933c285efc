//! SGD with Nesterov momentum and coupled weight decay, cosine learning-rate
//! decay and an exponential moving average of the parameters.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.03;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;
pub const DEFAULT_EMA_DECAY: f64 = 0.999;

/// `η·cos(7πs / 16S)`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("total steps must be positive".into()));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} exceeds total {total}")));
    }
    if step == 0 {
        return Ok(base);
    }
    Ok(base * (7.0 * PI * step as f64 / (16.0 * total as f64)).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    velocity: Vec<(String, Tensor)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub step: usize,
    pub total_steps: usize,
}

impl OptimState {
    pub fn new(params: &ModelParams, base_lr: f64, momentum: f64, weight_decay: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if total_steps == 0 {
            return Err(Error::InvalidArgument("total steps must be positive".into()));
        }
        Ok(OptimState {
            velocity: params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect(),
            momentum,
            weight_decay,
            base_lr,
            step: 0,
            total_steps,
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn velocities(&self) -> &[(String, Tensor)] {
        &self.velocity
    }

    /// Replaces the velocities, e.g. when resuming from a checkpoint.
    pub fn set_velocities(&mut self, velocity: Vec<(String, Tensor)>) -> Result<()> {
        if velocity.len() != self.velocity.len() {
            return Err(Error::InvalidArgument("velocity count mismatch".into()));
        }
        for ((n, t), (m, u)) in velocity.iter().zip(&self.velocity) {
            if n != m || t.shape() != u.shape() {
                return Err(Error::InvalidArgument(format!("velocity {n} does not match {m}")));
            }
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Learning rate for the current step.
    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.total_steps, self.base_lr)
    }
}

/// One update of every parameter:
/// `g = grad + wd·θ; v = μ·v + g; θ = θ − lr·(g + μ·v)`.
///
/// All gradients are checked before anything is modified. Parameters with no
/// gradient entry are treated as having zero gradient.
pub fn sgd_nesterov_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimState, lr: f64) -> Result<()> {
    for (name, t) in params.iter() {
        if let Some(g) = grads.get(name) {
            if g.shape() != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((name, theta), (vname, v)) in params.iter_mut().zip(state.velocity.iter_mut()) {
        debug_assert_eq!(name, vname);
        let grad = grads.get(name).map(|g| g.data());
        let theta = theta.data_mut();
        let v = v.data_mut();
        for i in 0..theta.len() {
            let g = grad.map_or(0.0, |g| g[i]) + wd * theta[i];
            v[i] = mu * v[i] + g;
            theta[i] -= lr * (g + mu * v[i]);
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    shadow: ModelParams,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &ModelParams, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay must be in [0, 1), got {decay}")));
        }
        Ok(EmaState {
            shadow: params.clone(),
            decay,
        })
    }

    pub fn from_shadow(shadow: ModelParams, decay: f64) -> Result<Self> {
        let mut s = Self::new(&shadow, decay)?;
        s.shadow = shadow;
        Ok(s)
    }

    pub fn shadow(&self) -> &ModelParams {
        &self.shadow
    }
}

/// `shadow = decay·shadow + (1 − decay)·params`.
pub fn ema_update(ema: &mut EmaState, params: &ModelParams) -> Result<()> {
    if ema.shadow.len() != params.len() {
        return Err(Error::InvalidArgument("EMA and parameter counts differ".into()));
    }
    let d = ema.decay;
    for ((sn, s), (pn, p)) in ema.shadow.iter_mut().zip(params.iter()) {
        if sn != pn || s.shape() != p.shape() {
            return Err(Error::InvalidArgument(format!("EMA tensor {sn} does not match {pn}")));
        }
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = d * *a + (1.0 - d) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use std::collections::HashMap;

    fn one_param(v: f64) -> ModelParams {
        ModelParams::new(vec![("w".into(), Tensor::vector(vec![v]))])
    }

    fn grads_of(v: f64) -> Gradients {
        // A graph whose gradient for "w" is v: loss = v·w.
        let mut g = Graph::new();
        let w = g.input("w", &[1]).unwrap();
        let l = g.scale(w, v);
        g.forward(&HashMap::from([("w".to_string(), Tensor::vector(vec![0.0]))]))
            .unwrap();
        g.backward(l, &Tensor::scalar(1.0)).unwrap()
    }

    #[test]
    fn cosine_schedule_values() {
        assert_eq!(cosine_lr(0, 100, 0.03).unwrap(), 0.03);
        assert!((cosine_lr(100, 100, 0.03).unwrap() - 0.0058527).abs() < 1e-7);
        assert!((cosine_lr(50, 100, 0.03).unwrap() - 0.023190).abs() < 1e-6);
        assert!(cosine_lr(101, 100, 0.03).is_err());
        assert!(cosine_lr(0, 0, 0.03).is_err());
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = one_param(1.5);
        let mut st = OptimState::new(&p, 0.03, 0.9, 0.0, 10).unwrap();
        sgd_nesterov_step(&mut p, &grads_of(0.0), &mut st, 0.03).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn weight_decay_single_step() {
        let mut p = one_param(1.0);
        let mut st = OptimState::new(&p, 0.03, 0.0, 5e-4, 10).unwrap();
        sgd_nesterov_step(&mut p, &grads_of(0.0), &mut st, 0.03).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.0 - 0.03 * 5e-4);
        assert!((p.get("w").unwrap().data()[0] - 0.999985).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_recurrence() {
        let (mu, wd, lr, c) = (0.9, 5e-4, 0.03, 0.7);
        let mut p = one_param(2.0);
        let mut st = OptimState::new(&p, lr, mu, wd, 10).unwrap();
        let grads = grads_of(c);
        let (mut theta, mut v) = (2.0f64, 0.0f64);
        for _ in 0..2 {
            sgd_nesterov_step(&mut p, &grads, &mut st, lr).unwrap();
            let g = c + wd * theta;
            v = mu * v + g;
            theta -= lr * (g + mu * v);
        }
        assert_eq!(p.get("w").unwrap().data()[0], theta);
        assert_eq!(st.velocity("w").unwrap().data()[0], v);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = one_param(0.25);
        let mut st = OptimState::new(&p, 0.1, 0.0, 0.0, 10).unwrap();
        sgd_nesterov_step(&mut p, &grads_of(-3.0), &mut st, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.25 - 0.1 * -3.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one_param(1.0);
        let mut st = OptimState::new(&p, 0.1, 0.9, 0.0, 10).unwrap();
        let err = sgd_nesterov_step(&mut p, &grads_of(f64::NAN), &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn ema_examples() {
        let p = one_param(1.0);
        let mut ema = EmaState::from_shadow(one_param(0.0), 0.999).unwrap();
        ema_update(&mut ema, &p).unwrap();
        assert!((ema.shadow().get("w").unwrap().data()[0] - 0.001).abs() < 1e-15);

        let mut fixed = EmaState::new(&p, 0.999).unwrap();
        ema_update(&mut fixed, &p).unwrap();
        assert_eq!(fixed.shadow().get("w").unwrap().data()[0], 1.0);

        assert!(EmaState::new(&p, 1.0).is_err());
    }
}
