//! SGD with momentum and Adam, both with coupled L2 weight decay, following
//! the PyTorch update rules.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::NamedParams;

use super::config::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Per-parameter state. SGD uses only `first` (the momentum buffer).
#[derive(Debug, Clone)]
pub struct ParamState {
    pub first: Tensor,
    pub second: Option<Tensor>,
    pub steps: u64,
}

#[derive(Debug)]
pub struct Optimizer {
    pub settings: OptimizerSettings,
    pub state: BTreeMap<String, ParamState>,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings) -> Self {
        Self {
            settings,
            state: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient, with learning
    /// rate `lr_factor * lr`. Parameters without a gradient are untouched.
    pub fn step(&mut self, params: &NamedParams, grads: &GradStore, lr_factor: f64) -> Result<()> {
        let s = self.settings;
        let lr = s.lr * lr_factor;
        for (name, var) in params {
            let Some(grad) = grads.get(var) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut g = grad.detach();
            if s.weight_decay != 0.0 {
                g = (g + (&p * s.weight_decay)?)?;
            }
            let update = match s.kind {
                OptimizerKind::Sgd => {
                    let buf = match self.state.get(name) {
                        Some(st) if s.momentum != 0.0 => ((&st.first * s.momentum)? + &g)?,
                        _ => g.clone(),
                    };
                    let steps = self.state.get(name).map_or(0, |st| st.steps) + 1;
                    self.state.insert(
                        name.clone(),
                        ParamState {
                            first: buf.clone(),
                            second: None,
                            steps,
                        },
                    );
                    (buf * lr)?
                }
                OptimizerKind::Adam => {
                    let (m, v, t) = match self.state.get(name) {
                        Some(st) => (
                            st.first.clone(),
                            st.second.clone().ok_or_else(|| {
                                Error::Checkpoint(format!("Adam state for {name} lacks a second moment"))
                            })?,
                            st.steps,
                        ),
                        None => (p.zeros_like()?, p.zeros_like()?, 0),
                    };
                    let t = t + 1;
                    let m = ((m * s.beta1)? + (&g * (1.0 - s.beta1))?)?;
                    let v = ((v * s.beta2)? + (g.sqr()? * (1.0 - s.beta2))?)?;
                    let bc1 = 1.0 - s.beta1.powi(t as i32);
                    let bc2 = 1.0 - s.beta2.powi(t as i32);
                    let denom = ((&v / bc2)?.sqrt()? + s.eps)?;
                    let update = ((&m / bc1)? / denom)?;
                    self.state.insert(
                        name.clone(),
                        ParamState {
                            first: m,
                            second: Some(v),
                            steps: t,
                        },
                    );
                    (update * lr)?
                }
            };
            var.set(&(p - update)?)?;
        }
        Ok(())
    }
}
