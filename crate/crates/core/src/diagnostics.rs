//! Cosine similarity of task embeddings: among variants of one task and
//! among the base (identity) variants of different tasks.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrmError};

/// `cos_within` is `None` when no task had two distinct variants to compare,
/// which is different from a measured mean of zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub step: u64,
    pub cos_within: Option<f64>,
    pub cos_across: Option<f64>,
    pub n_within_pairs: usize,
    pub n_across_pairs: usize,
}

fn row_norm(row: ArrayView1<'_, f32>, index: usize) -> Result<f64> {
    let n = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(TrmError::ZeroNormEmbedding(index));
    }
    Ok(n)
}

fn cosine(embeddings: &Array2<f32>, a: usize, b: usize) -> Result<f64> {
    for i in [a, b] {
        if i >= embeddings.nrows() {
            return Err(TrmError::IndexOutOfRange {
                index: i,
                rows: embeddings.nrows(),
            });
        }
    }
    let (ra, rb) = (embeddings.row(a), embeddings.row(b));
    let dot: f64 = ra.iter().zip(rb.iter()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let c = dot / (row_norm(ra, a)? * row_norm(rb, b)?);
    Ok(c.clamp(-1.0, 1.0))
}

/// Mean over unordered pairs of `rows`; `None` with fewer than two rows.
fn mean_pairwise(embeddings: &Array2<f32>, rows: &[usize]) -> Result<Option<(f64, usize)>> {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &a) in rows.iter().enumerate() {
        for &b in &rows[i + 1..] {
            sum += cosine(embeddings, a, b)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| (sum / n as f64, n)))
}

/// For each task with at least two distinct variants in `membership`
/// (task id, embedding row), the mean pairwise cosine of its variants;
/// returns the mean over those tasks and the number of pairs compared.
pub fn cosine_within_task(
    embeddings: &Array2<f32>,
    membership: &[(impl AsRef<str>, usize)],
) -> Result<(Option<f64>, usize)> {
    let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (task, row) in membership {
        let rows = by_task.entry(task.as_ref()).or_default();
        if !rows.contains(row) {
            rows.push(*row);
        }
    }
    let mut task_means = Vec::new();
    let mut pairs = 0;
    for rows in by_task.values() {
        if let Some((mean, n)) = mean_pairwise(embeddings, rows)? {
            task_means.push(mean);
            pairs += n;
        }
    }
    if task_means.is_empty() {
        return Ok((None, 0));
    }
    Ok((Some(task_means.iter().sum::<f64>() / task_means.len() as f64), pairs))
}

/// Mean pairwise cosine among base-variant rows, one per task.
pub fn cosine_across_tasks(embeddings: &Array2<f32>, base_indices: &[usize]) -> Result<(f64, usize)> {
    if base_indices.len() < 2 {
        return Err(TrmError::TooFewTasks {
            needed: 2,
            got: base_indices.len(),
        });
    }
    Ok(mean_pairwise(embeddings, base_indices)?.expect("two or more rows"))
}

/// Both measures for one batch. `membership` pairs each item's task id with
/// its embedding row; `base_indices` are the base rows of the batch's tasks.
pub fn cosine_report(
    step: u64,
    embeddings: &Array2<f32>,
    membership: &[(impl AsRef<str>, usize)],
    base_indices: &[usize],
) -> Result<CosineReport> {
    let (cos_within, n_within_pairs) = cosine_within_task(embeddings, membership)?;
    let (cos_across, n_across_pairs) = if base_indices.len() >= 2 {
        let (c, n) = cosine_across_tasks(embeddings, base_indices)?;
        (Some(c), n)
    } else {
        (None, 0)
    };
    Ok(CosineReport {
        step,
        cos_within,
        cos_across,
        n_within_pairs,
        n_across_pairs,
    })
}
