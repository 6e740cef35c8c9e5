//! Adapting a pre-trained checkpoint to unseen tasks, and the compute
//! budget planner.

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSpace;
use crate::dataset::{build_registry, DataMix, Split, TrainingTask, VariantRegistry};
use crate::error::{Result, TrmError};
use crate::model::{init_new_task_embeddings, Checkpoint, EmbeddingInit, LoraAdapters, ModelState, Trainable};
use crate::training::{
    continue_pretraining, embedding_rows, run_training, BatchStream, EvalContext, OptimizerConfig, OptimizerState,
    RunPlan, TrainRecord,
};

pub const DEFAULT_STAGED_FRACTION: f64 = 0.25;
pub const DEFAULT_LORA_RANK: usize = 16;
pub const DEFAULT_LORA_ALPHA: f64 = 16.0;

/// Post-training steps for the replication checkpoint and for the extended
/// pre-training variants.
pub const REPLICATION_POSTTRAIN_STEPS: u64 = 12_500;
pub const EXTENDED_POSTTRAIN_STEPS: u64 = 15_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Everything trains.
    Full,
    /// Only the new embedding rows train.
    EmbeddingsOnly,
    /// Embeddings only for the first part of the run, then everything.
    Staged,
    /// Low-rank adapters on the trunk plus the embedding rows.
    Lora,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staged_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f64>,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Strategy {
            kind,
            staged_fraction: None,
            lora_rank: None,
            lora_alpha: None,
        }
    }

    pub fn staged(fraction: f64) -> Self {
        Strategy {
            staged_fraction: Some(fraction),
            ..Strategy::new(StrategyKind::Staged)
        }
    }

    pub fn lora(rank: usize, alpha: f64) -> Self {
        Strategy {
            lora_rank: Some(rank),
            lora_alpha: Some(alpha),
            ..Strategy::new(StrategyKind::Lora)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrmError::StrategyConfig(m.to_string()));
        if self.kind != StrategyKind::Staged && self.staged_fraction.is_some() {
            return err("staged_fraction only applies to the staged strategy");
        }
        if self.kind != StrategyKind::Lora && (self.lora_rank.is_some() || self.lora_alpha.is_some()) {
            return err("lora_rank and lora_alpha only apply to the lora strategy");
        }
        let f = self.fraction();
        if !(f > 0.0 && f < 1.0) {
            return err("staged_fraction must lie strictly between 0 and 1");
        }
        if self.rank() == 0 {
            return err("lora_rank must be at least 1");
        }
        if !(self.alpha().is_finite() && self.alpha() > 0.0) {
            return err("lora_alpha must be positive");
        }
        Ok(())
    }

    pub fn fraction(&self) -> f64 {
        self.staged_fraction.unwrap_or(DEFAULT_STAGED_FRACTION)
    }

    pub fn rank(&self) -> usize {
        self.lora_rank.unwrap_or(DEFAULT_LORA_RANK)
    }

    pub fn alpha(&self) -> f64 {
        self.lora_alpha.unwrap_or(DEFAULT_LORA_ALPHA)
    }

    /// Steps (from 1) during which a staged run keeps the trunk frozen.
    pub fn frozen_steps(&self, total_steps: u64) -> u64 {
        match self.kind {
            StrategyKind::Staged => (self.fraction() * total_steps as f64).floor() as u64,
            StrategyKind::EmbeddingsOnly => total_steps,
            _ => 0,
        }
    }

    /// Trainable set at optimizer step `step` (1-based) of a `total_steps` run.
    pub fn trainable_at(&self, step: u64, total_steps: u64) -> Trainable {
        match self.kind {
            StrategyKind::Full => Trainable::ALL,
            StrategyKind::EmbeddingsOnly => Trainable::EMBEDDINGS_ONLY,
            StrategyKind::Staged if step <= self.frozen_steps(total_steps) => Trainable::EMBEDDINGS_ONLY,
            StrategyKind::Staged => Trainable::ALL,
            StrategyKind::Lora => Trainable::LORA,
        }
    }
}

/// Budget inputs and the resulting optimizer-step allowance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// Per-accelerator throughput of the reference hardware relative to the
    /// competition hardware.
    pub flops_ratio: f64,
    /// Reference accelerator count over competition accelerator count.
    pub accelerator_ratio: f64,
    pub wall_hours: f64,
    pub reserved_inference_hours: f64,
    pub batch_size: usize,
    pub measured_step_seconds: f64,
    pub planned_steps: u64,
}

impl BudgetPlan {
    pub fn new(
        flops_ratio: f64,
        accelerator_ratio: f64,
        wall_hours: f64,
        reserved_inference_hours: f64,
        batch_size: usize,
        measured_step_seconds: f64,
    ) -> Result<Self> {
        Ok(BudgetPlan {
            flops_ratio,
            accelerator_ratio,
            wall_hours,
            reserved_inference_hours,
            batch_size,
            measured_step_seconds,
            planned_steps: plan_budget(wall_hours, reserved_inference_hours, measured_step_seconds)?,
        })
    }

    /// Fraction of the reference compute available.
    pub fn compute_fraction(&self) -> Result<f64> {
        compute_fraction(self.flops_ratio, self.accelerator_ratio)
    }
}

fn to_micros(value: f64, unit_micros: f64, what: &str) -> Result<u64> {
    if !value.is_finite() || value < 0.0 {
        return Err(TrmError::InvalidBudget(format!("{what} must be finite and non-negative, got {value}")));
    }
    Ok((value * unit_micros).round() as u64)
}

/// `floor((wall - reserved) / step_time)`, computed in whole microseconds.
pub fn plan_budget(wall_hours: f64, reserved_inference_hours: f64, step_seconds: f64) -> Result<u64> {
    const HOUR_US: f64 = 3_600_000_000.0;
    let wall = to_micros(wall_hours, HOUR_US, "wall_hours")?;
    let reserved = to_micros(reserved_inference_hours, HOUR_US, "reserved_inference_hours")?;
    let step = to_micros(step_seconds, 1e6, "measured_step_seconds")?;
    if step == 0 {
        return Err(TrmError::InvalidBudget("step time must be positive".into()));
    }
    if reserved >= wall {
        return Err(TrmError::BudgetExhausted {
            wall_hours,
            reserved_hours: reserved_inference_hours,
        });
    }
    Ok((wall - reserved) / step)
}

/// `1 / (flops_ratio * accelerator_ratio)`.
pub fn compute_fraction(flops_ratio: f64, accelerator_ratio: f64) -> Result<f64> {
    if !(flops_ratio > 0.0 && accelerator_ratio > 0.0 && flops_ratio.is_finite() && accelerator_ratio.is_finite()) {
        return Err(TrmError::InvalidBudget("ratios must be positive".into()));
    }
    Ok(1.0 / (flops_ratio * accelerator_ratio))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosttrainPlan {
    pub steps: u64,
    pub batch_size: usize,
    pub augs_per_task: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_augs: usize,
    pub max_eval_pairs: usize,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationSpace,
    pub embedding_init: EmbeddingInit,
    /// Extra pre-training steps on the original mix before adapting.
    pub continued_pretrain_steps: u64,
}

impl Default for PosttrainPlan {
    fn default() -> Self {
        PosttrainPlan {
            steps: REPLICATION_POSTTRAIN_STEPS,
            batch_size: 384,
            augs_per_task: 1000,
            seed: 0,
            eval_every: 1000,
            eval_augs: 256,
            max_eval_pairs: 256,
            optimizer: OptimizerConfig::posttrain(),
            augmentation: AugmentationSpace::default(),
            embedding_init: EmbeddingInit::Mean,
            continued_pretrain_steps: 0,
        }
    }
}

impl PosttrainPlan {
    fn run_plan(&self) -> RunPlan {
        RunPlan {
            steps: self.steps,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            seed: self.seed,
            augs_per_task: self.augs_per_task,
            eval_augs: self.eval_augs,
            max_eval_pairs: self.max_eval_pairs,
            optimizer: self.optimizer,
            augmentation: self.augmentation,
        }
    }
}

/// The original pre-training data and registry, needed to continue
/// pre-training before adaptation.
pub struct PretrainContext<'a> {
    pub registry: &'a VariantRegistry,
    pub mix: &'a DataMix,
    pub plan: RunPlan,
}

pub struct PosttrainOutput {
    pub checkpoint: Checkpoint,
    pub registry: VariantRegistry,
    pub records: Vec<TrainRecord>,
}

/// Prepares the model for `test_tasks`: a fresh registry over them and new
/// embedding rows initialized from the pre-trained table. LoRA adapters are
/// attached for the LoRA strategy.
pub fn prepare_for_tasks(
    checkpoint: &Checkpoint,
    test_tasks: &Split,
    strategy: &Strategy,
    plan: &PosttrainPlan,
) -> Result<(ModelState<f32>, VariantRegistry, Vec<TrainingTask>)> {
    let train_tasks: Vec<TrainingTask> = test_tasks
        .tasks
        .iter()
        .map(|t| TrainingTask::from_task(t, true, false))
        .collect();
    if train_tasks.iter().all(|t| t.pairs.is_empty()) {
        return Err(TrmError::TooFewTasks { needed: 1, got: 0 });
    }
    let registry = build_registry(
        train_tasks.iter().map(|t| (t.task_id.as_str(), t.extent)),
        plan.augs_per_task,
        plan.seed,
        &plan.augmentation,
    )?;
    let mut state = checkpoint.state.clone();
    let rows = embedding_rows(&registry, state.config.embedding_mode);
    state.params.task_embeddings =
        init_new_task_embeddings(&state.params.task_embeddings, rows, plan.embedding_init, plan.seed)?;
    state.adapters = match strategy.kind {
        StrategyKind::Lora => Some(LoraAdapters::new(&state.config, strategy.rank(), strategy.alpha(), plan.seed)),
        _ => None,
    };
    Ok((state, registry, train_tasks))
}

/// Adapts `checkpoint` to `test_tasks` using only their train pairs.
pub fn posttrain(
    checkpoint: &Checkpoint,
    test_tasks: &Split,
    strategy: &Strategy,
    plan: &PosttrainPlan,
    pretrain_context: Option<PretrainContext<'_>>,
    on_record: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<PosttrainOutput> {
    strategy.validate()?;
    let run_plan = plan.run_plan();
    run_plan.validate(&checkpoint.state.config)?;

    let mut base = checkpoint.clone();
    if plan.continued_pretrain_steps > 0 {
        let ctx = pretrain_context.ok_or_else(|| {
            TrmError::ContinuedPretrainMappingLost("continued pre-training needs the original registry and data".into())
        })?;
        match base.registry_digest {
            Some(d) if d == ctx.registry.digest() => {}
            _ => {
                return Err(TrmError::ContinuedPretrainMappingLost(
                    "checkpoint registry digest does not match the supplied registry".into(),
                ))
            }
        }
        let continued = RunPlan {
            steps: plan.continued_pretrain_steps,
            eval_every: 0,
            eval_augs: 0,
            ..ctx.plan.clone()
        };
        continue_pretraining(&mut base.state, ctx.registry, ctx.mix, &continued, &mut |_| Ok(()))?;
    }

    let (mut state, registry, train_tasks) = prepare_for_tasks(&base, test_tasks, strategy, plan)?;
    let side = state.config.canvas_side;
    let eval_pairs: Vec<_> = test_tasks
        .tasks
        .iter()
        .flat_map(|t| t.test_pairs().into_iter().map(move |p| (t.task_id.clone(), p)))
        .collect();
    let scored = test_tasks
        .tasks
        .iter()
        .filter(|t| !t.test_examples.is_empty() && t.test_examples.iter().all(|e| e.output.is_some()))
        .cloned()
        .collect();
    let eval = EvalContext::new(&registry, &train_tasks, &eval_pairs, scored, &run_plan, side)?;
    let mut stream = BatchStream::new(&registry, &train_tasks, plan.batch_size, plan.seed, side)?;
    let mut optimizer = OptimizerState::new(plan.optimizer, &state);
    let total = plan.steps;
    let records = run_training(
        &mut state,
        &mut optimizer,
        &mut stream,
        &run_plan,
        &eval,
        &|step| strategy.trainable_at(step, total),
        on_record,
    )?;
    Ok(PosttrainOutput {
        checkpoint: Checkpoint {
            state,
            registry_digest: Some(registry.digest()),
        },
        registry,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_example() {
        assert_eq!(plan_budget(12.0, 1.0, 2.64).unwrap(), 15_000);
        assert!(matches!(plan_budget(12.0, 12.0, 2.64), Err(TrmError::BudgetExhausted { .. })));
        assert!(matches!(plan_budget(12.0, 1.0, 0.0), Err(TrmError::InvalidBudget(_))));
        assert!(matches!(plan_budget(f64::NAN, 1.0, 1.0), Err(TrmError::InvalidBudget(_))));
        assert_eq!(compute_fraction(8.0, 4.0).unwrap(), 1.0 / 32.0);
    }

    #[test]
    fn staged_schedule() {
        let s = Strategy::staged(0.25);
        assert_eq!(s.frozen_steps(400), 100);
        assert_eq!(s.trainable_at(100, 400), Trainable::EMBEDDINGS_ONLY);
        assert_eq!(s.trainable_at(101, 400), Trainable::ALL);
        assert_eq!(Strategy::new(StrategyKind::Staged).fraction(), 0.25);
    }

    #[test]
    fn strategy_fields_are_checked() {
        assert!(Strategy::new(StrategyKind::Full).validate().is_ok());
        assert!(Strategy::staged(0.5).validate().is_ok());
        assert!(Strategy::staged(1.0).validate().is_err());
        assert!(Strategy::lora(0, 1.0).validate().is_err());
        let bad = Strategy {
            lora_rank: Some(4),
            ..Strategy::new(StrategyKind::Full)
        };
        assert!(matches!(bad.validate(), Err(TrmError::StrategyConfig(_))));
        let toml_like: Strategy = serde_json::from_str(r#"{"kind":"lora"}"#).unwrap();
        assert_eq!((toml_like.rank(), toml_like.alpha()), (16, 16.0));
        assert!(serde_json::from_str::<Strategy>(r#"{"kind":"full","extra":1}"#).is_err());
    }
}
