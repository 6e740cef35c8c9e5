use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::truncated_normal;
use super::{ModelConfig, ModelParams, ParamGroup, Scalar};

/// Low-rank delta for one `in x out` weight: `x . W + (alpha / r) (x . A^T) . B^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T> {
    /// `r x in`
    pub a: Array2<T>,
    /// `out x r`, zero at initialization.
    pub b: Array2<T>,
}

impl<T: Scalar> Adapter<T> {
    fn init(rng: &mut ChaCha8Rng, rank: usize, d_in: usize, d_out: usize) -> Self {
        Adapter {
            a: truncated_normal(rng, (rank, d_in), 1.0 / (d_in as f64).sqrt()),
            b: Array2::zeros((d_out, rank)),
        }
    }

    /// The equivalent dense `in x out` delta.
    pub fn delta(&self, scale: T) -> Array2<T> {
        self.a.t().dot(&self.b.t()) * scale
    }

    fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> Adapter<U> {
        Adapter {
            a: self.a.mapv(f),
            b: self.b.mapv(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapters<T> {
    pub q: Adapter<T>,
    pub k: Adapter<T>,
    pub v: Adapter<T>,
    pub o: Adapter<T>,
    pub up: Adapter<T>,
    pub down: Adapter<T>,
}

impl<T> LayerAdapters<T> {
    fn all(&self) -> [&Adapter<T>; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    fn all_mut(&mut self) -> [&mut Adapter<T>; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.up, &mut self.down]
    }
}

/// Adapters on every trunk linear layer (attention projections and both
/// feed-forward matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters<T> {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LayerAdapters<T>>,
}

impl<T: Scalar> LoraAdapters<T> {
    pub fn new(config: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Self {
        assert!(rank >= 1, "LoRA rank must be at least 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        let layers = (0..config.n_trunk_layers)
            .map(|_| LayerAdapters {
                q: Adapter::init(&mut rng, rank, d, d),
                k: Adapter::init(&mut rng, rank, d, d),
                v: Adapter::init(&mut rng, rank, d, d),
                o: Adapter::init(&mut rng, rank, d, d),
                up: Adapter::init(&mut rng, rank, d, f),
                down: Adapter::init(&mut rng, rank, f, d),
            })
            .collect();
        LoraAdapters { rank, alpha, layers }
    }

    pub fn scale(&self) -> T {
        T::c(self.alpha / self.rank as f64)
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| T::zero())
    }

    pub(crate) fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> LoraAdapters<U> {
        LoraAdapters {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapters {
                    q: l.q.map(f),
                    k: l.k.map(f),
                    v: l.v.map(f),
                    o: l.o.map(f),
                    up: l.up.map(f),
                    down: l.down.map(f),
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapters<U> {
        self.map(|x| U::from(x).expect("float cast"))
    }

    /// A-then-B per adapter, layer by layer, in q, k, v, o, up, down order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| l.all())
            .flat_map(|ad| [ad.a.as_slice().expect("contiguous"), ad.b.as_slice().expect("contiguous")])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut [T])> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.all_mut())
            .flat_map(|ad| {
                [
                    (ParamGroup::Adapter, ad.a.as_slice_mut().expect("contiguous")),
                    (ParamGroup::Adapter, ad.b.as_slice_mut().expect("contiguous")),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Base parameters with every adapter folded into its weight.
    pub fn merged_into(&self, base: &ModelParams<T>) -> ModelParams<T> {
        let mut merged = base.clone();
        let s = self.scale();
        for (layer, ad) in merged.layers.iter_mut().zip(&self.layers) {
            layer.wq += &ad.q.delta(s);
            layer.wk += &ad.k.delta(s);
            layer.wv += &ad.v.delta(s);
            layer.wo += &ad.o.delta(s);
            layer.w_up += &ad.up.delta(s);
            layer.w_down += &ad.down.delta(s);
        }
        merged
    }
}
