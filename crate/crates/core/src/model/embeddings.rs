use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::forward::augmentation_encoding;
use super::{EmbeddingMode, ModelConfig, ModelState, Scalar};
use crate::augment::Augmentation;
use crate::error::{Result, TrmError};
use crate::grid::{CANVAS_SIDE, NUM_COLORS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub trunk: usize,
    pub embedding: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.trunk + self.embedding
    }
}

/// Closed form of the parameter shapes:
///
/// ```text
/// trunk = V*D + S*D                          token and position embeddings
///       + layers * (4*D*D + 2*D*F + 2*D)     q/k/v/o, up/down, two norm gains
///       + D*V + D + 1                        output head, halting head and bias
///       + (8 + 100 + 2*30) * E               explicit mode only
/// embedding = rows * E
/// ```
///
/// with `V` the vocabulary (11), `S` the sequence length and `F` the
/// feed-forward width.
pub fn count_parameters(config: &ModelConfig, n_embedding_rows: usize) -> ParameterCount {
    let d = config.hidden_dim;
    let f = config.ffn_dim();
    let v = config.vocab();
    let e = config.embed_dim;
    let per_layer = 4 * d * d + 2 * d * f + 2 * d;
    let mut trunk = v * d + config.seq_len() * d + config.n_trunk_layers * per_layer + d * v + d + 1;
    if config.embedding_mode == EmbeddingMode::Explicit {
        trunk += (8 + NUM_COLORS * NUM_COLORS + 2 * CANVAS_SIDE) * e;
    }
    ParameterCount {
        trunk,
        embedding: n_embedding_rows * e,
    }
}

/// The vector added to a task's single embedding row for augmentation `aug`.
pub fn encode_explicit_augmentation<T: Scalar>(aug: &Augmentation, state: &ModelState<T>) -> Result<Array1<T>> {
    let encoders = state
        .params
        .aug
        .as_ref()
        .ok_or(TrmError::ModeMismatch { expected: "explicit" })?;
    Ok(augmentation_encoding(encoders, aug))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    /// Every new row is the column-wise mean of the pre-trained rows.
    #[default]
    Mean,
    /// Rows drawn from a normal with the pre-trained per-dimension mean and variance.
    Gaussian,
}

pub fn init_new_task_embeddings<T: Scalar>(
    pretrained: &Array2<T>,
    n_new: usize,
    mode: EmbeddingInit,
    seed: u64,
) -> Result<Array2<T>> {
    if pretrained.nrows() == 0 {
        return Err(TrmError::EmptyPretrainedTable);
    }
    let table = pretrained.mapv(|x| x.to_f64().expect("finite"));
    let mean = table.mean_axis(Axis(0)).expect("non-empty table");
    match mode {
        EmbeddingInit::Mean => {
            let row = mean.mapv(T::c);
            Ok(Array2::from_shape_fn((n_new, pretrained.ncols()), |(_, j)| row[j]))
        }
        EmbeddingInit::Gaussian => {
            let var = table.var_axis(Axis(0), 0.0);
            let dists: Vec<_> = mean
                .iter()
                .zip(var.iter())
                .map(|(&m, &v)| Normal::new(m, v.sqrt()).expect("finite variance"))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Array2::zeros((n_new, pretrained.ncols()));
            for mut row in out.rows_mut() {
                for (x, dist) in row.iter_mut().zip(&dists) {
                    *x = T::c(dist.sample(&mut rng));
                }
            }
            Ok(out)
        }
    }
}
