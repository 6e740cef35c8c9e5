use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EmbeddingMode, LoraAdapters, ModelConfig, Scalar};
use crate::grid::{fnv1a64, CANVAS_SIDE, NUM_COLORS};

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Everything except the task embedding table.
    Trunk,
    TaskEmbedding,
    Adapter,
}

/// Weights are stored `in x out` and applied as `x . W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub norm_attn: Array1<T>,
    pub w_up: Array2<T>,
    pub w_down: Array2<T>,
    pub norm_ffn: Array1<T>,
}

/// Learned augmentation encodings for the explicit embedding mode.
#[derive(Clone, Debug, PartialEq)]
pub struct AugEncoders<T> {
    /// One row per D4 element.
    pub dihedral: Array2<T>,
    /// Row `10 * from + to` for each color mapping pair.
    pub color_pairs: Array2<T>,
    pub offset_x: Array2<T>,
    pub offset_y: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: Array2<T>,
    pub position_embedding: Array2<T>,
    pub task_embeddings: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub output_head: Array2<T>,
    pub halt_head: Array1<T>,
    pub halt_bias: Array1<T>,
    pub aug: Option<AugEncoders<T>>,
}

/// A full model: configuration, parameters and optional LoRA adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub adapters: Option<LoraAdapters<T>>,
}

fn slice<T>(a: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, impl ndarray::Dimension>) -> &[T] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice_mut<T>(a: &mut ndarray::ArrayBase<impl ndarray::DataMut<Elem = T>, impl ndarray::Dimension>) -> &mut [T] {
    a.as_slice_mut().expect("parameters are contiguous")
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig, n_embedding_rows: usize) -> Self {
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        let v = config.vocab();
        let e = config.embed_dim;
        let layer = || LayerParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            norm_attn: Array1::zeros(d),
            w_up: Array2::zeros((d, f)),
            w_down: Array2::zeros((f, d)),
            norm_ffn: Array1::zeros(d),
        };
        ModelParams {
            token_embedding: Array2::zeros((v, d)),
            position_embedding: Array2::zeros((config.seq_len(), d)),
            task_embeddings: Array2::zeros((n_embedding_rows, e)),
            layers: (0..config.n_trunk_layers).map(|_| layer()).collect(),
            output_head: Array2::zeros((d, v)),
            halt_head: Array1::zeros(d),
            halt_bias: Array1::zeros(1),
            aug: (config.embedding_mode == EmbeddingMode::Explicit).then(|| AugEncoders {
                dihedral: Array2::zeros((8, e)),
                color_pairs: Array2::zeros((NUM_COLORS * NUM_COLORS, e)),
                offset_x: Array2::zeros((CANVAS_SIDE, e)),
                offset_y: Array2::zeros((CANVAS_SIDE, e)),
            }),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::zero())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> ModelParams<U> {
        ModelParams {
            token_embedding: self.token_embedding.mapv(f),
            position_embedding: self.position_embedding.mapv(f),
            task_embeddings: self.task_embeddings.mapv(f),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.mapv(f),
                    wk: l.wk.mapv(f),
                    wv: l.wv.mapv(f),
                    wo: l.wo.mapv(f),
                    norm_attn: l.norm_attn.mapv(f),
                    w_up: l.w_up.mapv(f),
                    w_down: l.w_down.mapv(f),
                    norm_ffn: l.norm_ffn.mapv(f),
                })
                .collect(),
            output_head: self.output_head.mapv(f),
            halt_head: self.halt_head.mapv(f),
            halt_bias: self.halt_bias.mapv(f),
            aug: self.aug.as_ref().map(|a| AugEncoders {
                dihedral: a.dihedral.mapv(f),
                color_pairs: a.color_pairs.mapv(f),
                offset_x: a.offset_x.mapv(f),
                offset_y: a.offset_y.mapv(f),
            }),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        self.map(|x| U::from(x).expect("float cast"))
    }

    /// Every tensor in the fixed checkpoint order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &[T])> {
        let mut out = vec![
            ("token_embedding".to_string(), ParamGroup::Trunk, slice(&self.token_embedding)),
            ("position_embedding".to_string(), ParamGroup::Trunk, slice(&self.position_embedding)),
            ("task_embeddings".to_string(), ParamGroup::TaskEmbedding, slice(&self.task_embeddings)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", slice(&l.wq)),
                ("wk", slice(&l.wk)),
                ("wv", slice(&l.wv)),
                ("wo", slice(&l.wo)),
                ("norm_attn", slice(&l.norm_attn)),
                ("w_up", slice(&l.w_up)),
                ("w_down", slice(&l.w_down)),
                ("norm_ffn", slice(&l.norm_ffn)),
            ] {
                out.push((format!("layers.{i}.{name}"), ParamGroup::Trunk, t));
            }
        }
        out.push(("output_head".into(), ParamGroup::Trunk, slice(&self.output_head)));
        out.push(("halt_head".into(), ParamGroup::Trunk, slice(&self.halt_head)));
        out.push(("halt_bias".into(), ParamGroup::Trunk, slice(&self.halt_bias)));
        if let Some(a) = &self.aug {
            out.push(("aug.dihedral".into(), ParamGroup::Trunk, slice(&a.dihedral)));
            out.push(("aug.color_pairs".into(), ParamGroup::Trunk, slice(&a.color_pairs)));
            out.push(("aug.offset_x".into(), ParamGroup::Trunk, slice(&a.offset_x)));
            out.push(("aug.offset_y".into(), ParamGroup::Trunk, slice(&a.offset_y)));
        }
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut [T])> {
        let mut out = vec![
            (ParamGroup::Trunk, slice_mut(&mut self.token_embedding)),
            (ParamGroup::Trunk, slice_mut(&mut self.position_embedding)),
            (ParamGroup::TaskEmbedding, slice_mut(&mut self.task_embeddings)),
        ];
        for l in self.layers.iter_mut() {
            out.push((ParamGroup::Trunk, slice_mut(&mut l.wq)));
            out.push((ParamGroup::Trunk, slice_mut(&mut l.wk)));
            out.push((ParamGroup::Trunk, slice_mut(&mut l.wv)));
            out.push((ParamGroup::Trunk, slice_mut(&mut l.wo)));
            out.push((ParamGroup::Trunk, slice_mut(&mut l.norm_attn)));
            out.push((ParamGroup::Trunk, slice_mut(&mut l.w_up)));
            out.push((ParamGroup::Trunk, slice_mut(&mut l.w_down)));
            out.push((ParamGroup::Trunk, slice_mut(&mut l.norm_ffn)));
        }
        out.push((ParamGroup::Trunk, slice_mut(&mut self.output_head)));
        out.push((ParamGroup::Trunk, slice_mut(&mut self.halt_head)));
        out.push((ParamGroup::Trunk, slice_mut(&mut self.halt_bias)));
        if let Some(a) = &mut self.aug {
            out.push((ParamGroup::Trunk, slice_mut(&mut a.dihedral)));
            out.push((ParamGroup::Trunk, slice_mut(&mut a.color_pairs)));
            out.push((ParamGroup::Trunk, slice_mut(&mut a.offset_x)));
            out.push((ParamGroup::Trunk, slice_mut(&mut a.offset_y)));
        }
        out
    }

    pub fn n_embedding_rows(&self) -> usize {
        self.task_embeddings.nrows()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }
}

impl ModelParams<f32> {
    /// FNV-1a over the little-endian bytes of every tensor in `group`.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut bytes = Vec::new();
        for (_, g, t) in self.tensors() {
            if g == group {
                for x in t {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        fnv1a64(&bytes)
    }

    pub fn trunk_checksum(&self) -> u64 {
        self.checksum(ParamGroup::Trunk)
    }

    pub fn embedding_checksum(&self) -> u64 {
        self.checksum(ParamGroup::TaskEmbedding)
    }
}

pub(crate) fn truncated_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break T::c(z * std);
        }
    })
}

/// Deterministic initialization: truncated normal (std 0.02, cut at two
/// standard deviations) for every matrix, unit norm gains, zero halting bias
/// (initial halt probability 0.5) and zero augmentation encoders.
pub fn init_model<T: Scalar>(config: &ModelConfig, n_embedding_rows: usize, seed: u64) -> ModelState<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<T>::zeros(config, n_embedding_rows);
    let std = INIT_STD;
    params.token_embedding = truncated_normal(&mut rng, params.token_embedding.dim(), std);
    params.position_embedding = truncated_normal(&mut rng, params.position_embedding.dim(), std);
    params.task_embeddings = truncated_normal(&mut rng, params.task_embeddings.dim(), std);
    for l in params.layers.iter_mut() {
        l.wq = truncated_normal(&mut rng, l.wq.dim(), std);
        l.wk = truncated_normal(&mut rng, l.wk.dim(), std);
        l.wv = truncated_normal(&mut rng, l.wv.dim(), std);
        l.wo = truncated_normal(&mut rng, l.wo.dim(), std);
        l.w_up = truncated_normal(&mut rng, l.w_up.dim(), std);
        l.w_down = truncated_normal(&mut rng, l.w_down.dim(), std);
        l.norm_attn.fill(T::one());
        l.norm_ffn.fill(T::one());
    }
    params.output_head = truncated_normal(&mut rng, params.output_head.dim(), std);
    let halt = truncated_normal::<T>(&mut rng, (1, config.hidden_dim), std);
    params.halt_head = halt.row(0).to_owned();
    ModelState {
        config: config.clone(),
        params,
        adapters: None,
    }
}

impl<T: Scalar> ModelState<T> {
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
            adapters: self.adapters.as_ref().map(LoraAdapters::cast),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::desk();
        let a = init_model::<f32>(&cfg, 8, 42);
        let b = init_model::<f32>(&cfg, 8, 42);
        assert_eq!(a, b);
        assert_eq!(a.params.task_embeddings.dim(), (8, 64));
        for (name, _, t) in a.params.tensors() {
            assert!(t.iter().all(|x| x.is_finite() && x.abs() < 1.0 + 1e-6), "{name}");
        }
        assert_ne!(init_model::<f32>(&cfg, 8, 43).params, a.params);
    }

    #[test]
    fn tensor_orders_agree() {
        let cfg = ModelConfig { embedding_mode: EmbeddingMode::Explicit, ..ModelConfig::desk() };
        let mut p = init_model::<f32>(&cfg, 3, 0).params;
        let lens: Vec<_> = p.tensors().iter().map(|(_, _, t)| t.len()).collect();
        let groups: Vec<_> = p.tensors().iter().map(|(_, g, _)| *g).collect();
        let mut_lens: Vec<_> = p.tensors_mut().iter().map(|(_, t)| t.len()).collect();
        let mut_groups: Vec<_> = p.tensors_mut().iter().map(|(g, _)| *g).collect();
        assert_eq!(lens, mut_lens);
        assert_eq!(groups, mut_groups);
    }

    #[test]
    fn checksum_tracks_groups() {
        let mut p = init_model::<f32>(&ModelConfig::desk(), 4, 0).params;
        let trunk = p.trunk_checksum();
        let emb = p.embedding_checksum();
        p.task_embeddings[[0, 0]] += 1.0;
        assert_eq!(p.trunk_checksum(), trunk);
        assert_ne!(p.embedding_checksum(), emb);
        p.layers[0].wq[[0, 0]] += 1.0;
        assert_ne!(p.trunk_checksum(), trunk);
    }
}
