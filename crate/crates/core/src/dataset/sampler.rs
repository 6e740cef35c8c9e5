use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TrainingTask, VariantRegistry};
use crate::augment::{apply_augmentation_on, Augmentation};
use crate::error::{Result, TrmError};
use crate::grid::TokenCanvas;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    /// Registry row of the drawn variant.
    pub embedding_index: usize,
    pub task_index: usize,
    pub augmentation: Augmentation,
    pub input: TokenCanvas,
    pub target: TokenCanvas,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.items.len()
    }
}

/// One epoch: each task contributes all of its pairs under a single variant
/// drawn at random; items are shuffled together and cut into batches of
/// `batch_size` (the last batch may be short).
pub fn sample_epoch(
    registry: &VariantRegistry,
    tasks: &[TrainingTask],
    batch_size: usize,
    epoch_seed: u64,
    canvas_side: usize,
) -> Result<Vec<Batch>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut items = Vec::with_capacity(tasks.iter().map(|t| t.pairs.len()).sum());
    for task in tasks {
        let task_index = registry
            .task_index(&task.task_id)
            .ok_or_else(|| TrmError::UnknownTaskId(task.task_id.clone()))?;
        let variant = rng.random_range(registry.variants(task_index));
        let (_, augmentation) = registry.entry(variant);
        for pair in &task.pairs {
            let input = apply_augmentation_on(&pair.input, augmentation, canvas_side)?.to_canvas(canvas_side)?;
            let target = apply_augmentation_on(&pair.output, augmentation, canvas_side)?.to_canvas(canvas_side)?;
            items.push(BatchItem {
                embedding_index: variant,
                task_index,
                augmentation: *augmentation,
                input,
                target,
            });
        }
    }
    items.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(items.len().div_ceil(batch_size));
    let mut iter = items.into_iter().peekable();
    while iter.peek().is_some() {
        batches.push(Batch {
            items: iter.by_ref().take(batch_size).collect(),
        });
    }
    Ok(batches)
}
