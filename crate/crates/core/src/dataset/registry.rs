use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::augment::{
    sample_augmentations, task_seed, Augmentation, AugmentationSpace, GridExtent, AUGMENTATION_RECORD_LEN,
};
use crate::error::{Result, TrmError};
use crate::grid::fnv1a64;

/// Persistent mapping from (task, augmentation) to embedding row.
///
/// Entries are laid out task-major: task `t`'s variants occupy rows
/// `t * augs_per_task .. (t + 1) * augs_per_task`, and the first of them is
/// always the identity augmentation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantRegistry {
    task_ids: Vec<String>,
    augs_per_task: usize,
    augmentations: Vec<Augmentation>,
    index: HashMap<String, usize>,
}

/// Builds a registry with `augs_per_task` variants per task, sampled from
/// `space` with a per-task seed derived from `seed`.
pub fn build_registry<'a>(
    tasks: impl IntoIterator<Item = (&'a str, GridExtent)>,
    augs_per_task: usize,
    seed: u64,
    space: &AugmentationSpace,
) -> Result<VariantRegistry> {
    if augs_per_task == 0 {
        return Err(TrmError::RegistryFormat("augs_per_task must be at least 1".into()));
    }
    let mut task_ids = Vec::new();
    let mut augmentations = Vec::new();
    for (id, extent) in tasks {
        let augs = sample_augmentations(task_seed(seed, id), augs_per_task, &extent, space)?;
        task_ids.push(id.to_string());
        augmentations.extend(augs);
    }
    VariantRegistry::from_parts(task_ids, augs_per_task, augmentations)
}

impl VariantRegistry {
    pub fn from_parts(task_ids: Vec<String>, augs_per_task: usize, augmentations: Vec<Augmentation>) -> Result<Self> {
        if augs_per_task == 0 || augmentations.len() != task_ids.len() * augs_per_task {
            return Err(TrmError::RegistryFormat(format!(
                "{} entries for {} tasks x {augs_per_task}",
                augmentations.len(),
                task_ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(task_ids.len());
        for (i, id) in task_ids.iter().enumerate() {
            if id.len() > u8::MAX as usize {
                return Err(TrmError::RegistryFormat(format!("task id `{id}` longer than 255 bytes")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(TrmError::RegistryFormat(format!("duplicate task id `{id}`")));
            }
            if !augmentations[i * augs_per_task].is_identity() {
                return Err(TrmError::RegistryFormat(format!("task `{id}` lacks an identity variant")));
            }
        }
        Ok(VariantRegistry {
            task_ids,
            augs_per_task,
            augmentations,
            index,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn augs_per_task(&self) -> usize {
        self.augs_per_task
    }

    pub fn n_entries(&self) -> usize {
        self.augmentations.len()
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.index.get(task_id).copied()
    }

    /// `(task_id, augmentation)` for an embedding row.
    pub fn entry(&self, embedding_index: usize) -> (&str, &Augmentation) {
        (
            &self.task_ids[embedding_index / self.augs_per_task],
            &self.augmentations[embedding_index],
        )
    }

    pub fn task_of(&self, embedding_index: usize) -> usize {
        embedding_index / self.augs_per_task
    }

    /// Embedding rows of a task's variants.
    pub fn variants(&self, task_index: usize) -> std::ops::Range<usize> {
        task_index * self.augs_per_task..(task_index + 1) * self.augs_per_task
    }

    pub fn variant_augmentations(&self, task_index: usize) -> &[Augmentation] {
        &self.augmentations[self.variants(task_index)]
    }

    /// Row of the identity variant.
    pub fn base_index(&self, task_index: usize) -> usize {
        task_index * self.augs_per_task
    }

    /// Header `[n_tasks:u32][augs_per_task:u32]` (little-endian), then per
    /// entry `[id_len:u8][id bytes][13-byte augmentation record]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.n_entries() * (AUGMENTATION_RECORD_LEN + 16));
        out.extend_from_slice(&(self.n_tasks() as u32).to_le_bytes());
        out.extend_from_slice(&(self.augs_per_task as u32).to_le_bytes());
        for (i, aug) in self.augmentations.iter().enumerate() {
            let id = self.task_ids[i / self.augs_per_task].as_bytes();
            out.push(id.len() as u8);
            out.extend_from_slice(id);
            out.extend_from_slice(&aug.to_record());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TrmError::RegistryFormat(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let n_tasks = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let augs = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let mut pos = 8;
        let mut task_ids = Vec::with_capacity(n_tasks);
        let mut augmentations = Vec::with_capacity(n_tasks.saturating_mul(augs).min(1 << 24));
        for entry in 0..n_tasks.saturating_mul(augs) {
            let len = *bytes.get(pos).ok_or_else(|| bad("truncated entry"))? as usize;
            pos += 1;
            let id = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated task id"))?;
            let id = std::str::from_utf8(id).map_err(|_| bad("task id is not utf-8"))?;
            pos += len;
            if entry % augs == 0 {
                task_ids.push(id.to_string());
            } else if task_ids.last().map(String::as_str) != Some(id) {
                return Err(bad("entries are not grouped by task"));
            }
            let record = bytes
                .get(pos..pos + AUGMENTATION_RECORD_LEN)
                .ok_or_else(|| bad("truncated augmentation record"))?;
            augmentations.push(Augmentation::from_record(record).ok_or_else(|| bad("invalid augmentation record"))?);
            pos += AUGMENTATION_RECORD_LEN;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        VariantRegistry::from_parts(task_ids, augs, augmentations)
    }

    /// FNV-1a of the serialized form; checkpoints record it.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| TrmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TrmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
