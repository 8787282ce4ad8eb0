use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoments,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            ..Self::adamw(learning_rate)
        }
    }

    pub fn adamw(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::AdaptiveMoments,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// One parameter tensor handed to [`optimizer_step`].
pub struct Slot<'a> {
    pub weights: &'a mut [f64],
    pub grads: &'a [f64],
    /// Frozen slots are skipped entirely: neither weights nor state move.
    pub trainable: bool,
    pub decay: bool,
}

/// Per-tensor moment buffers. SGD uses `first` as its velocity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn ensure(&mut self, slots: &[Slot<'_>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = slots.iter().map(|s| vec![0.0; s.weights.len()]).collect();
            self.second = self.first.clone();
        }
        let matches = self.first.len() == slots.len()
            && slots.iter().zip(&self.first).all(|(s, m)| s.weights.len() == m.len());
        if !matches {
            return Err(Error::Usage("optimizer state does not match parameter shapes".into()));
        }
        Ok(())
    }
}

/// Applies one update in place.
pub fn optimizer_step(slots: &mut [Slot<'_>], state: &mut OptimizerState, cfg: &OptimizerConfig) -> Result<()> {
    for s in slots.iter() {
        if s.weights.len() != s.grads.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} weights",
                s.grads.len(),
                s.weights.len()
            )));
        }
        if s.trainable && !s.grads.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric { layer: "optimizer" });
        }
    }
    state.ensure(slots)?;
    state.step += 1;
    let lr = cfg.learning_rate;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, s) in slots.iter_mut().enumerate().filter(|(_, s)| s.trainable) {
        let m = &mut state.first[i];
        match cfg.kind {
            OptimizerKind::SgdMomentum => {
                for ((w, &g), v) in s.weights.iter_mut().zip(s.grads).zip(m.iter_mut()) {
                    *v = cfg.momentum * *v - lr * g;
                    *w += *v;
                }
            }
            OptimizerKind::AdaptiveMoments => {
                let decay = if s.decay { lr * cfg.weight_decay } else { 0.0 };
                let v = &mut state.second[i];
                for (((w, &g), m), v) in s.weights.iter_mut().zip(s.grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *w -= decay * *w;
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}
