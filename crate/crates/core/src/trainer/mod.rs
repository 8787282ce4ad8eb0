//! Batching, embedding caching and the optimization loop.

mod batch;
mod optimizer;

use serde::{Deserialize, Serialize};

pub use batch::{epoch_permutation, make_batch, precompute_image_embeddings, steps_per_epoch, Batch, EmbeddingCache};
pub use optimizer::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState, Slot};

use crate::encoders::{backward, encode_image, forward_image, forward_shape, BatchTrace};
use crate::geometry::{AugmentConfig, PointCloud, ViewFeature};
use crate::losses::{anneal_beta, hcl, info_nce, BetaSchedule, LossConfig, BETA0, TAU_INIT};
use crate::metrics::LevelMetrics;
use crate::pipeline::RetrievalTask;
use crate::{Embedding, EncoderParams, Error, Result};

/// One shape with its views.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTuple {
    pub shape_id: String,
    pub class_id: String,
    pub cloud: PointCloud,
    pub views: Vec<ViewFeature>,
}

impl TrainTuple {
    pub fn new(cloud: PointCloud, views: Vec<ViewFeature>) -> Self {
        Self {
            shape_id: cloud.shape_id.clone(),
            class_id: cloud.class_id.clone(),
            cloud,
            views,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    InfoNce,
    Hcl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Joint warm-up, then the image branch is frozen.
    PreAlign,
    /// Image branch frozen throughout.
    FineTune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossKind,
    pub beta0: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub warmup_epochs: usize,
    pub augment: AugmentConfig,
    pub tau_init: f64,
    pub learn_tau: bool,
    pub use_cache: bool,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            optimizer: OptimizerConfig::adamw(5e-4),
            loss: LossKind::InfoNce,
            beta0: BETA0,
            seed: 0,
            mode: TrainMode::PreAlign,
            warmup_epochs: 10,
            augment: AugmentConfig::default(),
            tau_init: TAU_INIT,
            learn_tau: true,
            use_cache: true,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 || (self.loss == LossKind::Hcl && self.batch_size < 2) {
            return Err(Error::param(format!("batch size {} too small", self.batch_size)));
        }
        if !(self.beta0.is_finite() && self.beta0 >= 0.0) {
            return Err(Error::param(format!("beta0 must be finite and non-negative, got {}", self.beta0)));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::param(format!("tau_init must be positive, got {}", self.tau_init)));
        }
        Ok(())
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        BetaSchedule::annealed(self.beta0, self.epochs)
    }

    fn image_frozen_at(&self, epoch: usize) -> bool {
        match self.mode {
            TrainMode::FineTune => true,
            TrainMode::PreAlign => epoch >= self.warmup_epochs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub beta: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochEval {
    pub instance: LevelMetrics,
    pub class: Option<LevelMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub beta: f64,
    pub tau: f64,
    pub eval: Option<EpochEval>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log_tau: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Step log as JSON lines.
    pub fn steps_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|r| serde_json::to_string(r).expect("step record serializes") + "\n")
            .collect()
    }
}

pub fn train(config: &TrainConfig, tuples: &[TrainTuple], initial: &EncoderParams) -> Result<TrainOutcome> {
    train_with(config, tuples, initial, None, &mut |_| {})
}

/// Runs training, evaluating on `eval` per `config.eval_every` and calling
/// `on_epoch` after every epoch.
pub fn train_with(
    config: &TrainConfig,
    tuples: &[TrainTuple],
    initial: &EncoderParams,
    eval: Option<&RetrievalTask>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if tuples.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if let Some(t) = tuples.iter().find(|t| t.views.is_empty()) {
        return Err(Error::Precondition(format!("shape {} has no views", t.shape_id)));
    }
    if tuples.len() < config.batch_size {
        return Err(Error::param(format!(
            "batch size {} exceeds the {} training shapes",
            config.batch_size,
            tuples.len()
        )));
    }

    let mut params = initial.clone();
    params.shape_trainable = true;
    params.image_trainable = !config.image_frozen_at(0);
    let mut loss_cfg = LossConfig {
        log_tau: config.tau_init.ln(),
        beta: 0.0,
    };
    loss_cfg.clamp();
    let schedule = config.beta_schedule();
    let mut state = OptimizerState::default();
    let mut cache: Option<EmbeddingCache> = None;
    let steps = steps_per_epoch(tuples.len(), config.batch_size);
    let mut out = TrainOutcome {
        params: params.clone(),
        log_tau: loss_cfg.log_tau,
        steps: Vec::new(),
        epochs: Vec::new(),
    };

    for epoch in 0..config.epochs {
        if config.image_frozen_at(epoch) && params.image_trainable {
            params.image_trainable = false;
        }
        if config.use_cache && !params.image_trainable && cache.is_none() {
            cache = Some(precompute_image_embeddings(&params, tuples)?);
        }
        let image_fp = cache.as_ref().map(|_| params.image.fingerprint());
        let beta = match config.loss {
            LossKind::Hcl => anneal_beta(epoch, &schedule)?,
            LossKind::InfoNce => 0.0,
        };
        loss_cfg.beta = beta;
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let batch = make_batch(tuples, config.batch_size, &config.augment, epoch, step, config.seed)?;
            let mut trace = BatchTrace::default();
            for cloud in &batch.clouds {
                trace.shapes.push(forward_shape(&params, cloud)?);
            }
            let mut images: Vec<Embedding> = Vec::with_capacity(batch.views.len());
            for (&i, &v) in batch.indices.iter().zip(&batch.views) {
                let view = &tuples[i].views[v];
                if params.image_trainable {
                    let t = forward_image(&params, view)?;
                    images.push(t.embedding().clone());
                    trace.images.push(t);
                } else if let (Some(c), Some(fp)) = (&cache, &image_fp) {
                    images.push(c.get(fp, &tuples[i].shape_id, view.view_index)?.clone());
                } else {
                    images.push(encode_image(&params, view)?);
                }
            }
            let shapes: Vec<Embedding> = trace.shapes.iter().map(|t| t.embedding().clone()).collect();
            let tau = loss_cfg.tau();
            let loss = match config.loss {
                LossKind::InfoNce => info_nce(&shapes, &images, loss_cfg.log_tau)?,
                LossKind::Hcl => hcl(&shapes, &images, loss_cfg.log_tau, beta)?,
            };
            if !loss.loss.is_finite() {
                return Err(Error::Aborted {
                    epoch,
                    step,
                    reason: "non-finite loss".into(),
                });
            }
            let d_image: &[Vec<f64>] = if params.image_trainable { &loss.d_image } else { &[] };
            let grads = backward(&params, &trace, &loss.d_shape, d_image)?;
            let tau_grad = [loss.d_log_tau];
            let mut log_tau = [loss_cfg.log_tau];
            {
                let (shape_trainable, image_trainable) = (params.shape_trainable, params.image_trainable);
                let mut slots: Vec<Slot<'_>> = Vec::new();
                for (w, g) in params.shape.tensors_mut().into_iter().zip(grads.shape.tensors()) {
                    slots.push(Slot {
                        weights: w,
                        grads: g,
                        trainable: shape_trainable,
                        decay: true,
                    });
                }
                for (w, g) in params.image.tensors_mut().into_iter().zip(grads.image.tensors()) {
                    slots.push(Slot {
                        weights: w,
                        grads: g,
                        trainable: image_trainable,
                        decay: true,
                    });
                }
                slots.push(Slot {
                    weights: &mut log_tau,
                    grads: &tau_grad,
                    trainable: config.learn_tau,
                    decay: false,
                });
                optimizer_step(&mut slots, &mut state, &config.optimizer).map_err(|e| match e {
                    Error::Numeric { .. } => Error::Aborted {
                        epoch,
                        step,
                        reason: "non-finite gradient".into(),
                    },
                    other => other,
                })?;
            }
            loss_cfg.log_tau = log_tau[0];
            loss_cfg.clamp();
            loss_sum += loss.loss;
            out.steps.push(StepRecord {
                epoch,
                step,
                loss: loss.loss,
                beta,
                tau,
            });
        }
        let last = epoch + 1 == config.epochs;
        let eval_now = config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last);
        let eval_result = match eval.filter(|_| eval_now) {
            Some(task) => {
                let report = task.run(&params)?;
                Some(EpochEval {
                    instance: report.instance,
                    class: report.class,
                })
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / steps as f64,
            beta,
            tau: loss_cfg.tau(),
            eval: eval_result,
        };
        on_epoch(&record);
        out.epochs.push(record);
    }
    if !params.is_finite() {
        return Err(Error::Numeric { layer: "params" });
    }
    out.params = params;
    out.log_tau = loss_cfg.log_tau;
    Ok(out)
}

#[cfg(test)]
mod tests;
