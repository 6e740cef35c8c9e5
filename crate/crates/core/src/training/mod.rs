//! Loss, optimizer and the pre-training loop.

mod optimizer;

use std::collections::{HashSet, VecDeque};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation_on, invert_augmentation, Augmentation, AugmentationSpace, task_seed};
use crate::dataset::{build_registry, sample_epoch, Batch, BatchItem, DataMix, ExamplePair, Task, TrainingTask, VariantRegistry};
use crate::diagnostics::cosine_report;
use crate::error::{Result, TrmError};
use crate::model::{
    compute_gradients, forward, init_model, Checkpoint, EmbeddingMode, LossBreakdown, ModelConfig, ModelInput,
    ModelState, Scalar, Trainable,
};
use crate::vote::{predict_augmented, score_pass_at_k, TaskVotes};

pub use optimizer::{OptimizerConfig, OptimizerState};

/// Loss from already computed logits.
///
/// `step_logits[i][s]` are the `seq_len x vocab` logits of item `i` at
/// supervision step `s`, `halt_logits[i][s]` the matching halting logits.
pub fn compute_loss<T: Scalar>(
    step_logits: &[Vec<Array2<T>>],
    halt_logits: &[Vec<T>],
    targets: &[&[u8]],
    halt_targets: &[Vec<f64>],
) -> Result<LossBreakdown> {
    let mut cell = 0.0;
    let mut halt = 0.0;
    let mut tokens = 0usize;
    let mut steps = 0usize;
    for (i, per_step) in step_logits.iter().enumerate() {
        for (s, logits) in per_step.iter().enumerate() {
            cell += crate::model::cell_loss_and_grad(logits, targets[i], T::one()).0;
            tokens += logits.nrows();
            let h = halt_logits[i][s].to_f64().unwrap_or(f64::NAN);
            halt += crate::model::halt_loss_and_grad(h, halt_targets[i][s]).0;
            steps += 1;
        }
    }
    let cell = cell / tokens.max(1) as f64;
    let halt = halt / steps.max(1) as f64;
    let total = cell + halt;
    if !total.is_finite() {
        return Err(TrmError::NonFiniteLoss(format!("cell {cell}, halt {halt}")));
    }
    Ok(LossBreakdown { total, cell, halt })
}

/// Row of the embedding table an item uses under `mode`.
pub fn embedding_row(mode: EmbeddingMode, registry_row: usize, task_index: usize) -> usize {
    match mode {
        EmbeddingMode::PerVariant => registry_row,
        EmbeddingMode::Explicit => task_index,
    }
}

/// Pairs of the named tasks in their base (identity) frame.
pub fn identity_items<'a>(
    registry: &VariantRegistry,
    pairs: impl IntoIterator<Item = (&'a str, &'a ExamplePair)>,
    canvas_side: usize,
) -> Result<Vec<BatchItem>> {
    pairs
        .into_iter()
        .map(|(task_id, pair)| {
            let task_index = registry
                .task_index(task_id)
                .ok_or_else(|| TrmError::UnknownTaskId(task_id.to_string()))?;
            let encode = |g| apply_augmentation_on(g, &Augmentation::IDENTITY, canvas_side)?.to_canvas(canvas_side);
            Ok(BatchItem {
                embedding_index: registry.base_index(task_index),
                task_index,
                augmentation: Augmentation::IDENTITY,
                input: encode(&pair.input)?,
                target: encode(&pair.output)?,
            })
        })
        .collect()
}

const EVAL_CHUNK: usize = 64;

/// Fraction of items whose final-step prediction, decoded and mapped back
/// to the original frame, equals the target grid.
pub fn evaluate_exact_accuracy(state: &ModelState<f32>, items: &[BatchItem]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mode = state.config.embedding_mode;
    let side = state.config.canvas_side;
    let mut correct = 0usize;
    for chunk in items.chunks(EVAL_CHUNK) {
        let inputs: Vec<ModelInput<'_>> = chunk.iter().map(|it| ModelInput::from_item(it, mode)).collect();
        let out = forward(state, &inputs)?;
        for (item, logits) in chunk.iter().zip(&out.logits) {
            let predicted = crate::grid::TokenCanvas::new(side, crate::model::argmax_tokens(logits))?;
            let inverse = invert_augmentation(&item.augmentation);
            if inverse.apply_to_canvas(&predicted) == inverse.apply_to_canvas(&item.target) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPlan {
    pub steps: u64,
    pub batch_size: usize,
    /// Record metrics every this many steps (0: only at start and end).
    pub eval_every: u64,
    pub seed: u64,
    pub augs_per_task: usize,
    /// Augmented predictions per test input for pass@k during evaluation
    /// (0 disables pass@k).
    pub eval_augs: usize,
    /// Cap on pairs used for the train and eval exact-accuracy metrics.
    pub max_eval_pairs: usize,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationSpace,
}

impl Default for RunPlan {
    fn default() -> Self {
        RunPlan {
            steps: 750_000,
            batch_size: 768,
            eval_every: 10_000,
            seed: 0,
            augs_per_task: 1000,
            eval_augs: 32,
            max_eval_pairs: 256,
            optimizer: OptimizerConfig::pretrain(),
            augmentation: AugmentationSpace::default(),
        }
    }
}

impl RunPlan {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.augs_per_task == 0 {
            return Err(TrmError::StrategyConfig("batch_size and augs_per_task must be positive".into()));
        }
        if self.augmentation.canvas_side != config.canvas_side {
            return Err(TrmError::ModelConfig(format!(
                "augmentation canvas {} differs from model canvas {}",
                self.augmentation.canvas_side, config.canvas_side
            )));
        }
        Ok(())
    }

    fn records_at(&self, step: u64) -> bool {
        step == 0 || step == self.steps || (self.eval_every > 0 && step.is_multiple_of(self.eval_every))
    }
}

/// One metrics line of the run's JSON-lines stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    /// Batch loss of this step; absent for step 0.
    pub loss: Option<f64>,
    pub cell_loss: Option<f64>,
    pub halt_loss: Option<f64>,
    pub trunk_lr: f64,
    pub embedding_lr: f64,
    pub train_exact_accuracy: f64,
    pub eval_exact_accuracy: Option<f64>,
    pub pass_at_2: Option<f64>,
    pub pass_at_n: Option<f64>,
    pub cos_within: Option<f64>,
    pub cos_across: Option<f64>,
    pub n_within_pairs: usize,
    pub n_across_pairs: usize,
}

/// Endless stream of batches, one sampled epoch after another.
pub struct BatchStream<'a> {
    registry: &'a VariantRegistry,
    tasks: &'a [TrainingTask],
    batch_size: usize,
    seed: u64,
    canvas_side: usize,
    epoch: u64,
    pending: VecDeque<Batch>,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        registry: &'a VariantRegistry,
        tasks: &'a [TrainingTask],
        batch_size: usize,
        seed: u64,
        canvas_side: usize,
    ) -> Result<Self> {
        if tasks.iter().all(|t| t.pairs.is_empty()) {
            return Err(TrmError::TooFewTasks { needed: 1, got: 0 });
        }
        Ok(BatchStream {
            registry,
            tasks,
            batch_size,
            seed,
            canvas_side,
            epoch: 0,
            pending: VecDeque::new(),
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        while self.pending.is_empty() {
            let epoch_seed = task_seed(self.seed, &format!("epoch {}", self.epoch));
            self.pending
                .extend(sample_epoch(self.registry, self.tasks, self.batch_size, epoch_seed, self.canvas_side)?);
            self.epoch += 1;
        }
        Ok(self.pending.pop_front().expect("non-empty"))
    }

    pub fn epochs_started(&self) -> u64 {
        self.epoch
    }
}

/// One optimizer step on `batch`.
pub fn train_step(
    state: &mut ModelState<f32>,
    optimizer: &mut OptimizerState<f32>,
    batch: &Batch,
    trainable: Trainable,
) -> Result<LossBreakdown> {
    let mode = state.config.embedding_mode;
    let inputs: Vec<ModelInput<'_>> = batch.items.iter().map(|it| ModelInput::from_item(it, mode)).collect();
    let targets: Vec<&[u8]> = batch.items.iter().map(|it| it.target.tokens()).collect();
    let (loss, grads, _) = compute_gradients(state, &inputs, &targets, trainable)?;
    optimizer.apply(state, &grads, trainable)?;
    Ok(loss)
}

/// What a run evaluates on when it records metrics.
pub struct EvalContext<'a> {
    pub registry: &'a VariantRegistry,
    pub train_items: Vec<BatchItem>,
    pub eval_items: Vec<BatchItem>,
    /// Tasks scored with pass@k, with their known test outputs.
    pub scored_tasks: Vec<Task>,
    pub eval_augs: usize,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        registry: &'a VariantRegistry,
        train_tasks: &[TrainingTask],
        eval_pairs: &[(String, ExamplePair)],
        scored_tasks: Vec<Task>,
        plan: &RunPlan,
        canvas_side: usize,
    ) -> Result<Self> {
        let train_pairs = train_tasks
            .iter()
            .flat_map(|t| t.pairs.iter().map(move |p| (t.task_id.as_str(), p)))
            .take(plan.max_eval_pairs);
        let eval_pairs = eval_pairs.iter().map(|(id, p)| (id.as_str(), p)).take(plan.max_eval_pairs);
        Ok(EvalContext {
            registry,
            train_items: identity_items(registry, train_pairs, canvas_side)?,
            eval_items: identity_items(registry, eval_pairs, canvas_side)?,
            scored_tasks,
            eval_augs: plan.eval_augs.min(registry.augs_per_task()),
        })
    }

    fn pass_at(&self, state: &ModelState<f32>) -> Result<Option<(f64, f64)>> {
        if self.eval_augs == 0 || self.scored_tasks.is_empty() {
            return Ok(None);
        }
        let votes = self
            .scored_tasks
            .iter()
            .map(|t| TaskVotes::from_predictions(&predict_augmented(state, self.registry, t, self.eval_augs)?, false))
            .collect::<Result<Vec<_>>>()?;
        let split = crate::dataset::Split::new("scored", self.scored_tasks.clone())?;
        Ok(Some((
            score_pass_at_k(&votes, &split, 2)?,
            score_pass_at_k(&votes, &split, self.eval_augs)?,
        )))
    }

    pub fn record(
        &self,
        step: u64,
        state: &ModelState<f32>,
        optimizer: &OptimizerState<f32>,
        last: Option<(&Batch, LossBreakdown)>,
    ) -> Result<TrainRecord> {
        let (trunk_lr, embedding_lr) = optimizer.current_lrs();
        let mut record = TrainRecord {
            step,
            loss: last.map(|(_, l)| l.total),
            cell_loss: last.map(|(_, l)| l.cell),
            halt_loss: last.map(|(_, l)| l.halt),
            trunk_lr,
            embedding_lr,
            train_exact_accuracy: evaluate_exact_accuracy(state, &self.train_items)?,
            eval_exact_accuracy: if self.eval_items.is_empty() {
                None
            } else {
                Some(evaluate_exact_accuracy(state, &self.eval_items)?)
            },
            ..TrainRecord::default()
        };
        if let Some((p2, pn)) = self.pass_at(state)? {
            record.pass_at_2 = Some(p2);
            record.pass_at_n = Some(pn);
        }
        if let (Some((batch, _)), EmbeddingMode::PerVariant) = (last, state.config.embedding_mode) {
            let membership: Vec<(&str, usize)> = batch
                .items
                .iter()
                .map(|it| (self.registry.task_ids()[it.task_index].as_str(), it.embedding_index))
                .collect();
            let mut seen = HashSet::new();
            let bases: Vec<usize> = batch
                .items
                .iter()
                .filter(|it| seen.insert(it.task_index))
                .map(|it| self.registry.base_index(it.task_index))
                .collect();
            let report = cosine_report(step, &state.params.task_embeddings, &membership, &bases)?;
            record.cos_within = report.cos_within;
            record.cos_across = report.cos_across;
            record.n_within_pairs = report.n_within_pairs;
            record.n_across_pairs = report.n_across_pairs;
        }
        Ok(record)
    }
}

/// Runs `steps` optimizer steps, recording metrics per `plan`. The
/// trainable set may depend on the (1-based) step.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    state: &mut ModelState<f32>,
    optimizer: &mut OptimizerState<f32>,
    stream: &mut BatchStream<'_>,
    plan: &RunPlan,
    eval: &EvalContext<'_>,
    trainable_at: &dyn Fn(u64) -> Trainable,
    on_record: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    let mut records = Vec::new();
    let first = eval.record(0, state, optimizer, None)?;
    on_record(&first)?;
    records.push(first);
    for step in 1..=plan.steps {
        let batch = stream.next_batch()?;
        let loss = train_step(state, optimizer, &batch, trainable_at(step))?;
        if plan.records_at(step) {
            let record = eval.record(step, state, optimizer, Some((&batch, loss)))?;
            log::info!(
                "step {step}: loss {:.4} train exact {:.3}",
                loss.total,
                record.train_exact_accuracy
            );
            on_record(&record)?;
            records.push(record);
        }
    }
    Ok(records)
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub registry: VariantRegistry,
    pub records: Vec<TrainRecord>,
}

/// Embedding table rows a model needs for `registry` under `mode`.
pub fn embedding_rows(registry: &VariantRegistry, mode: EmbeddingMode) -> usize {
    match mode {
        EmbeddingMode::PerVariant => registry.n_entries(),
        EmbeddingMode::Explicit => registry.n_tasks(),
    }
}

/// Pre-trains a fresh model on `mix`.
pub fn pretrain(
    mix: &DataMix,
    config: &ModelConfig,
    plan: &RunPlan,
    on_record: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<PretrainOutput> {
    plan.validate(config)?;
    let registry = build_registry(
        mix.train.iter().map(|t| (t.task_id.as_str(), t.extent)),
        plan.augs_per_task,
        plan.seed,
        &plan.augmentation,
    )?;
    let mut state = init_model::<f32>(config, embedding_rows(&registry, config.embedding_mode), plan.seed);
    let records = continue_pretraining(&mut state, &registry, mix, plan, on_record)?;
    Ok(PretrainOutput {
        checkpoint: Checkpoint {
            state,
            registry_digest: Some(registry.digest()),
        },
        registry,
        records,
    })
}

/// Further pre-training of an existing model against its own registry.
pub fn continue_pretraining(
    state: &mut ModelState<f32>,
    registry: &VariantRegistry,
    mix: &DataMix,
    plan: &RunPlan,
    on_record: &mut dyn FnMut(&TrainRecord) -> Result<()>,
) -> Result<Vec<TrainRecord>> {
    plan.validate(&state.config)?;
    let side = state.config.canvas_side;
    let scored: HashSet<&str> = mix.eval.iter().map(|(id, _)| id.as_str()).collect();
    let scored_tasks = mix.tasks.iter().filter(|t| scored.contains(t.task_id.as_str())).cloned().collect();
    let eval = EvalContext::new(registry, &mix.train, &mix.eval, scored_tasks, plan, side)?;
    let mut stream = BatchStream::new(registry, &mix.train, plan.batch_size, plan.seed, side)?;
    let mut optimizer = OptimizerState::new(plan.optimizer, state);
    run_training(state, &mut optimizer, &mut stream, plan, &eval, &|_| Trainable::ALL, on_record)
}
