//! Augmented inference, majority voting and pass@k scoring.

use std::collections::HashMap;

use serde::Serialize;

use crate::augment::{apply_augmentation_on, invert_augmentation, Augmentation};
use crate::dataset::{Split, Task, VariantRegistry};
use crate::error::{Result, TrmError};
use crate::grid::{canonical_digest, Grid, GridDigest, TokenCanvas};
use crate::model::{forward, EmbeddingMode, ModelInput, ModelState};

/// Evaluation-time augmentation counts.
pub const EVAL_AUGMENTATION_PRESETS: [usize; 3] = [256, 512, 1000];

/// Anything that maps augmented input canvases to predicted canvases.
pub trait Predictor {
    fn canvas_side(&self) -> usize;

    fn embedding_mode(&self) -> EmbeddingMode;

    /// Predicted canvas and halting probability per input.
    fn predict(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<(TokenCanvas, f64)>>;
}

impl Predictor for ModelState<f32> {
    fn canvas_side(&self) -> usize {
        self.config.canvas_side
    }

    fn embedding_mode(&self) -> EmbeddingMode {
        self.config.embedding_mode
    }

    fn predict(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<(TokenCanvas, f64)>> {
        let out = forward(self, inputs)?;
        out.logits
            .iter()
            .zip(&out.halt_logits)
            .map(|(logits, halts)| {
                let tokens = crate::model::argmax_tokens(logits);
                let halt = f64::from(*halts.last().expect("at least one step"));
                Ok((TokenCanvas::new(self.config.canvas_side, tokens)?, 1.0 / (1.0 + (-halt).exp())))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub augmentation: Augmentation,
    /// Decoded and mapped back to the original frame.
    pub grid: Grid,
    pub digest: GridDigest,
    pub halt_confidence: f64,
}

/// Predictions for every test input of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub task_id: String,
    pub examples: Vec<Vec<Prediction>>,
}

/// Predicts every test input of `task` under the first `n_augs` registry
/// variants of the task (the first is always the identity).
pub fn predict_augmented(
    predictor: &impl Predictor,
    registry: &VariantRegistry,
    task: &Task,
    n_augs: usize,
) -> Result<PredictionSet> {
    let task_index = registry
        .task_index(&task.task_id)
        .ok_or_else(|| TrmError::UnknownTaskId(task.task_id.clone()))?;
    if n_augs == 0 || n_augs > registry.augs_per_task() {
        return Err(TrmError::InsufficientAugmentationSpace {
            available: registry.augs_per_task() as u128,
            requested: n_augs,
        });
    }
    let side = predictor.canvas_side();
    let rows: Vec<usize> = registry.variants(task_index).take(n_augs).collect();
    let mut examples = Vec::with_capacity(task.test_examples.len());
    for example in &task.test_examples {
        let mut canvases = Vec::with_capacity(n_augs);
        for &row in &rows {
            let (_, aug) = registry.entry(row);
            canvases.push(apply_augmentation_on(&example.input, aug, side)?.to_canvas(side)?);
        }
        let inputs: Vec<ModelInput<'_>> = rows
            .iter()
            .zip(&canvases)
            .map(|(&row, canvas)| ModelInput {
                tokens: canvas.tokens(),
                embedding_row: match predictor.embedding_mode() {
                    EmbeddingMode::PerVariant => row,
                    EmbeddingMode::Explicit => task_index,
                },
                augmentation: *registry.entry(row).1,
            })
            .collect();
        let outputs = predictor.predict(&inputs)?;
        let predictions = inputs
            .iter()
            .zip(outputs)
            .map(|(input, (canvas, halt_confidence))| {
                let grid = invert_augmentation(&input.augmentation).apply_to_canvas(&canvas);
                Prediction {
                    augmentation: input.augmentation,
                    digest: canonical_digest(&grid),
                    grid,
                    halt_confidence,
                }
            })
            .collect();
        examples.push(predictions);
    }
    Ok(PredictionSet {
        task_id: task.task_id.clone(),
        examples,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedGrid {
    pub grid: Grid,
    pub digest: GridDigest,
    pub count: usize,
    /// Sum of weights; equals `count` for unweighted votes.
    pub weight: f64,
}

/// Distinct grids ranked by weight descending, then digest ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteResult {
    pub ranked: Vec<RankedGrid>,
}

impl VoteResult {
    pub fn top(&self, k: usize) -> impl Iterator<Item = &Grid> {
        self.ranked.iter().take(k).map(|r| &r.grid)
    }

    pub fn top2(&self) -> Vec<&Grid> {
        self.top(2).collect()
    }

    pub fn total_count(&self) -> usize {
        self.ranked.iter().map(|r| r.count).sum()
    }
}

fn tally(predictions: &[Prediction], weights: impl Iterator<Item = f64>) -> Result<VoteResult> {
    if predictions.is_empty() {
        return Err(TrmError::EmptyPredictionSet);
    }
    let mut by_digest: HashMap<GridDigest, RankedGrid> = HashMap::new();
    for (p, w) in predictions.iter().zip(weights) {
        let entry = by_digest.entry(p.digest).or_insert_with(|| RankedGrid {
            grid: p.grid.clone(),
            digest: p.digest,
            count: 0,
            weight: 0.0,
        });
        entry.count += 1;
        entry.weight += w;
    }
    let mut ranked: Vec<RankedGrid> = by_digest.into_values().collect();
    ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.digest.cmp(&b.digest)));
    Ok(VoteResult { ranked })
}

/// Majority vote over the predictions for one test input.
pub fn vote(predictions: &[Prediction]) -> Result<VoteResult> {
    tally(predictions, std::iter::repeat(1.0))
}

/// Vote weighted by per-prediction halting confidence.
pub fn halting_weighted_vote(predictions: &[Prediction], confidences: &[f64]) -> Result<VoteResult> {
    if confidences.len() != predictions.len() {
        return Err(TrmError::WeightLengthMismatch {
            weights: confidences.len(),
            predictions: predictions.len(),
        });
    }
    tally(predictions, confidences.iter().copied())
}

/// Vote results for every test input of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVotes {
    pub task_id: String,
    pub examples: Vec<VoteResult>,
}

impl TaskVotes {
    pub fn from_predictions(set: &PredictionSet, halting_weighted: bool) -> Result<Self> {
        let examples = set
            .examples
            .iter()
            .map(|preds| {
                if halting_weighted {
                    let w: Vec<f64> = preds.iter().map(|p| p.halt_confidence).collect();
                    halting_weighted_vote(preds, &w)
                } else {
                    vote(preds)
                }
            })
            .collect::<Result<_>>()?;
        Ok(TaskVotes {
            task_id: set.task_id.clone(),
            examples,
        })
    }
}

/// Per test input: 1 if the solution is among the top `k` ranked grids.
/// Averaged over a task's test inputs, then over tasks.
pub fn score_pass_at_k(results: &[TaskVotes], solutions: &Split, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for task_votes in results {
        let task = solutions.task(&task_votes.task_id).ok_or_else(|| TrmError::MissingSolution {
            task_id: task_votes.task_id.clone(),
            example: 0,
        })?;
        let mut credit = 0.0;
        for (i, result) in task_votes.examples.iter().enumerate() {
            let solution = task
                .test_examples
                .get(i)
                .and_then(|t| t.output.as_ref())
                .ok_or_else(|| TrmError::MissingSolution {
                    task_id: task_votes.task_id.clone(),
                    example: i,
                })?;
            if result.top(k).any(|g| g == solution) {
                credit += 1.0;
            }
        }
        if !task_votes.examples.is_empty() {
            total += credit / task_votes.examples.len() as f64;
        }
    }
    Ok(total / results.len() as f64)
}

#[derive(Serialize)]
struct Attempts<'a> {
    attempt_1: &'a Grid,
    attempt_2: &'a Grid,
}

/// Submission JSON: task id to one `{attempt_1, attempt_2}` object per test
/// input. With a single distinct prediction both attempts are that grid.
pub fn submission_json(results: &[TaskVotes]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for task in results {
        let attempts: Vec<serde_json::Value> = task
            .examples
            .iter()
            .map(|r| {
                let top = r.top2();
                let first = top[0];
                let second = top.get(1).copied().unwrap_or(first);
                serde_json::to_value(Attempts {
                    attempt_1: first,
                    attempt_2: second,
                })
                .expect("grids serialize")
            })
            .collect();
        map.insert(task.task_id.clone(), serde_json::Value::Array(attempts));
    }
    serde_json::Value::Object(map)
}
