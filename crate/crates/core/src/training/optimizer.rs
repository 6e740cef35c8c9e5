use serde::{Deserialize, Serialize};

use crate::error::{Result, TrmError};
use crate::model::{Gradients, ModelState, ParamGroup, Scalar, Trainable};

/// AdamW with two learning-rate groups: the trunk (with weight decay) and the
/// task embedding table (without). LoRA adapters use the trunk rate without
/// decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub trunk_lr: f64,
    pub embedding_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::pretrain()
    }
}

impl OptimizerConfig {
    /// Pre-training at global batch 768.
    pub fn pretrain() -> Self {
        OptimizerConfig {
            trunk_lr: 1e-4,
            embedding_lr: 1e-2,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 2000,
        }
    }

    /// Post-training at batch 384: both rates doubled, short warmup.
    pub fn posttrain() -> Self {
        OptimizerConfig::pretrain().for_posttraining()
    }

    /// The post-training deltas applied to a pre-training configuration.
    pub fn for_posttraining(self) -> Self {
        OptimizerConfig {
            trunk_lr: self.trunk_lr * 2.0,
            embedding_lr: self.embedding_lr * 2.0,
            warmup_steps: 100,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.trunk_lr > 0.0
            && self.embedding_lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrmError::StrategyConfig(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning-rate multiplier for optimizer step `step` (1-based).
    pub fn warmup_factor(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
    /// Updates applied to this tensor (drives bias correction).
    updates: u64,
}

/// Moment estimates for every tensor of a model, in tensor order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: OptimizerConfig,
    /// Optimizer steps taken.
    pub step: u64,
    params: Vec<Moments<T>>,
    adapters: Vec<Moments<T>>,
}

fn moments<T: Scalar>(len: usize) -> Moments<T> {
    Moments {
        first: vec![T::zero(); len],
        second: vec![T::zero(); len],
        updates: 0,
    }
}

fn is_trainable(group: ParamGroup, trainable: Trainable) -> bool {
    match group {
        ParamGroup::Trunk => trainable.trunk,
        ParamGroup::TaskEmbedding => trainable.embeddings,
        ParamGroup::Adapter => trainable.adapters,
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, state: &ModelState<T>) -> Self {
        OptimizerState {
            config,
            step: 0,
            params: state.params.tensors().iter().map(|(_, _, t)| moments(t.len())).collect(),
            adapters: state
                .adapters
                .as_ref()
                .map(|a| a.tensors().iter().map(|t| moments(t.len())).collect())
                .unwrap_or_default(),
        }
    }

    pub fn current_lrs(&self) -> (f64, f64) {
        let f = self.config.warmup_factor(self.step.max(1));
        (self.config.trunk_lr * f, self.config.embedding_lr * f)
    }

    /// One decoupled-weight-decay Adam update. Groups outside `trainable`
    /// are skipped entirely: neither their values nor their moments change.
    pub fn apply(&mut self, state: &mut ModelState<T>, grads: &Gradients<T>, trainable: Trainable) -> Result<()> {
        self.step += 1;
        let cfg = self.config;
        let factor = cfg.warmup_factor(self.step);
        let grad_tensors = grads.params.tensors();
        for ((group, values), (moments, (name, _, grad))) in state
            .params
            .tensors_mut()
            .into_iter()
            .zip(self.params.iter_mut().zip(grad_tensors))
        {
            if !is_trainable(group, trainable) {
                continue;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrmError::NonFiniteGradient(name));
            }
            let (lr, wd) = match group {
                ParamGroup::TaskEmbedding => (cfg.embedding_lr, 0.0),
                _ => (cfg.trunk_lr, cfg.weight_decay),
            };
            adam_update(values, grad, moments, &cfg, lr * factor, wd);
        }
        if trainable.adapters {
            if let (Some(adapters), Some(adapter_grads)) = (state.adapters.as_mut(), grads.adapters.as_ref()) {
                for ((_, values), (moments, grad)) in adapters
                    .tensors_mut()
                    .into_iter()
                    .zip(self.adapters.iter_mut().zip(adapter_grads.tensors()))
                {
                    adam_update(values, grad, moments, &cfg, cfg.trunk_lr * factor, 0.0);
                }
            }
        }
        Ok(())
    }
}

fn adam_update<T: Scalar>(values: &mut [T], grad: &[T], m: &mut Moments<T>, cfg: &OptimizerConfig, lr: f64, wd: f64) {
    m.updates += 1;
    let t = m.updates as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let correction1 = T::c(1.0 - cfg.beta1.powi(t));
    let correction2 = T::c((1.0 - cfg.beta2.powi(t)).sqrt());
    let step_size = T::c(lr);
    let decay = T::c(1.0 - lr * wd);
    let eps = T::c(cfg.eps);
    for (((p, &g), mean), sq) in values.iter_mut().zip(grad).zip(m.first.iter_mut()).zip(m.second.iter_mut()) {
        *p *= decay;
        *mean = b1 * *mean + (T::one() - b1) * g;
        *sq = b2 * *sq + (T::one() - b2) * g * g;
        let denom = sq.sqrt() / correction2 + eps;
        *p -= step_size * (*mean / correction1) / denom;
    }
}
