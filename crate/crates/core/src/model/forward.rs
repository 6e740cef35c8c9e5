//! Forward pass, loss and hand-written backward pass.
//!
//! Sequences are processed one at a time as `seq_len x hidden_dim`
//! matrices; batch results are reduced in item order so outputs do not
//! depend on scheduling.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::lora::{Adapter, LayerAdapters, LoraAdapters};
use super::params::{AugEncoders, LayerParams, ModelParams, ModelState};
use super::{EmbeddingMode, ModelConfig, Scalar};
use crate::augment::Augmentation;
use crate::dataset::BatchItem;
use crate::error::{Result, TrmError};
use crate::grid::{TokenCanvas, NUM_COLORS};

const NORM_EPS: f64 = 1e-5;

/// One sequence as the model sees it.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub tokens: &'a [u8],
    /// Row of the task embedding table (registry entry in per-variant mode,
    /// task index in explicit mode).
    pub embedding_row: usize,
    pub augmentation: Augmentation,
}

impl<'a> ModelInput<'a> {
    pub fn from_item(item: &'a BatchItem, mode: EmbeddingMode) -> Self {
        ModelInput {
            tokens: item.input.tokens(),
            embedding_row: match mode {
                EmbeddingMode::PerVariant => item.embedding_index,
                EmbeddingMode::Explicit => item.task_index,
            },
            augmentation: item.augmentation,
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub trunk: bool,
    pub embeddings: bool,
    pub adapters: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        trunk: true,
        embeddings: true,
        adapters: false,
    };
    pub const EMBEDDINGS_ONLY: Trainable = Trainable {
        trunk: false,
        embeddings: true,
        adapters: false,
    };
    pub const LORA: Trainable = Trainable {
        trunk: false,
        embeddings: true,
        adapters: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub params: ModelParams<T>,
    pub adapters: Option<LoraAdapters<T>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cell: f64,
    pub halt: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Per item: final-step argmax canvas equals the target canvas.
    pub exact: Vec<bool>,
}

impl BatchStats {
    pub fn exact_accuracy(&self) -> f64 {
        if self.exact.is_empty() {
            return 0.0;
        }
        self.exact.iter().filter(|&&e| e).count() as f64 / self.exact.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Final (or halted) step logits per item, `seq_len x vocab`.
    pub logits: Vec<Array2<T>>,
    /// Per item, one halting logit per supervision step run.
    pub halt_logits: Vec<Vec<T>>,
    /// Per item, the logits of every supervision step run.
    pub supervision_logits: Vec<Vec<Array2<T>>>,
    pub trunk_applications: usize,
}

struct Weights<'a, T> {
    cfg: &'a ModelConfig,
    p: &'a ModelParams<T>,
    lora: Option<&'a LoraAdapters<T>>,
}

impl<'a, T: Scalar> Weights<'a, T> {
    fn of(state: &'a ModelState<T>) -> Self {
        Weights {
            cfg: &state.config,
            p: &state.params,
            lora: state.adapters.as_ref(),
        }
    }

    fn layer_adapters(&self, i: usize) -> Option<&'a LayerAdapters<T>> {
        self.lora.map(|l| &l.layers[i])
    }

    fn lora_scale(&self) -> T {
        self.lora.map_or(T::zero(), LoraAdapters::scale)
    }
}

fn linear<T: Scalar>(x: &Array2<T>, w: &Array2<T>, adapter: Option<&Adapter<T>>, scale: T) -> (Array2<T>, Option<Array2<T>>) {
    let mut y = x.dot(w);
    let u = adapter.map(|ad| {
        let u = x.dot(&ad.a.t());
        y.scaled_add(scale, &u.dot(&ad.b.t()));
        u
    });
    (y, u)
}

/// Backward of [`linear`]; accumulates weight and adapter gradients when
/// requested and returns the input gradient.
fn linear_back<T: Scalar>(
    x: &Array2<T>,
    dy: &Array2<T>,
    w: &Array2<T>,
    grad_w: Option<&mut Array2<T>>,
    adapter: Option<(&Adapter<T>, &Array2<T>)>,
    grad_adapter: Option<&mut Adapter<T>>,
    scale: T,
) -> Array2<T> {
    if let Some(gw) = grad_w {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), gw);
    }
    let mut dx = dy.dot(&w.t());
    if let Some((ad, u)) = adapter {
        let du = dy.dot(&ad.b) * scale;
        if let Some(g) = grad_adapter {
            general_mat_mul(scale, &dy.t(), u, T::one(), &mut g.b);
            general_mat_mul(T::one(), &du.t(), x, T::one(), &mut g.a);
        }
        general_mat_mul(T::one(), &du, &ad.a, T::one(), &mut dx);
    }
    dx
}

fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row /= sum;
    }
}

/// Row-wise RMS normalization; returns (normalized, per-row rms).
fn rms_normalize<T: Scalar>(r: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let d = T::c(r.ncols() as f64);
    let eps = T::c(NORM_EPS);
    let rms: Array1<T> = r
        .rows()
        .into_iter()
        .map(|row| (row.iter().map(|&v| v * v).sum::<T>() / d + eps).sqrt())
        .collect();
    let mut n = r.clone();
    for (mut row, &s) in n.rows_mut().into_iter().zip(rms.iter()) {
        row /= s;
    }
    (n, rms)
}

fn rms_normalize_back<T: Scalar>(dn: &Array2<T>, n: &Array2<T>, rms: &Array1<T>) -> Array2<T> {
    let d = T::c(n.ncols() as f64);
    let mut dr = dn.clone();
    for ((mut out, n_row), &s) in dr.rows_mut().into_iter().zip(n.rows()).zip(rms.iter()) {
        let dot = out.iter().zip(n_row.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        Zip::from(&mut out).and(&n_row).for_each(|o, &nv| *o = (*o - nv * dot) / s);
    }
    dr
}

fn gelu<T: Scalar>(u: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::c(0.044715);
    let half = T::c(0.5);
    half * u * (T::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::c(0.044715);
    let half = T::c(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::c(3.0) * k * u * u)
}

fn scale_rows_by<T: Scalar>(m: &mut Array2<T>, gain: &Array1<T>) {
    for mut row in m.rows_mut() {
        row *= gain;
    }
}

struct BlockCache<T> {
    h: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    o: Array2<T>,
    n1: Array2<T>,
    rms1: Array1<T>,
    h1: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    n2: Array2<T>,
    rms2: Array1<T>,
    /// Adapter intermediates `x . A^T` for q, k, v, o, up, down.
    lora_u: [Option<Array2<T>>; 6],
}

fn block_forward<T: Scalar>(
    cfg: &ModelConfig,
    layer: &LayerParams<T>,
    adapters: Option<&LayerAdapters<T>>,
    scale: T,
    h: Array2<T>,
) -> (Array2<T>, BlockCache<T>) {
    let dh = cfg.head_dim();
    let (q, uq) = linear(&h, &layer.wq, adapters.map(|a| &a.q), scale);
    let (k, uk) = linear(&h, &layer.wk, adapters.map(|a| &a.k), scale);
    let (v, uv) = linear(&h, &layer.wv, adapters.map(|a| &a.v), scale);
    let inv_sqrt = T::one() / T::c(dh as f64).sqrt();
    let mut o = Array2::zeros(h.dim());
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for j in 0..cfg.n_heads {
        let cols = s![.., j * dh..(j + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= inv_sqrt;
        softmax_rows(&mut scores);
        o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let (a, uo) = linear(&o, &layer.wo, adapters.map(|a| &a.o), scale);
    let r1 = &h + &a;
    let (n1, rms1) = rms_normalize(&r1);
    let mut h1 = n1.clone();
    scale_rows_by(&mut h1, &layer.norm_attn);

    let (pre, uup) = linear(&h1, &layer.w_up, adapters.map(|a| &a.up), scale);
    let act = pre.mapv(gelu);
    let (m, udown) = linear(&act, &layer.w_down, adapters.map(|a| &a.down), scale);
    let r2 = &h1 + &m;
    let (n2, rms2) = rms_normalize(&r2);
    let mut out = n2.clone();
    scale_rows_by(&mut out, &layer.norm_ffn);

    let cache = BlockCache {
        h,
        q,
        k,
        v,
        probs,
        o,
        n1,
        rms1,
        h1,
        pre,
        act,
        n2,
        rms2,
        lora_u: [uq, uk, uv, uo, uup, udown],
    };
    (out, cache)
}

struct GradSink<'a, T> {
    layer: Option<&'a mut LayerParams<T>>,
    adapters: Option<&'a mut LayerAdapters<T>>,
}

fn block_backward<T: Scalar>(
    cfg: &ModelConfig,
    layer: &LayerParams<T>,
    adapters: Option<&LayerAdapters<T>>,
    scale: T,
    cache: &BlockCache<T>,
    dout: &Array2<T>,
    sink: GradSink<'_, T>,
) -> Array2<T> {
    let GradSink {
        layer: mut gl,
        adapters: mut ga,
    } = sink;
    let ad = |i: usize| -> Option<(&Adapter<T>, &Array2<T>)> {
        adapters.map(|a| {
            let which = [&a.q, &a.k, &a.v, &a.o, &a.up, &a.down][i];
            (which, cache.lora_u[i].as_ref().expect("adapter cache present"))
        })
    };

    // out = n2 * g2
    if let Some(g) = gl.as_deref_mut() {
        g.norm_ffn += &(dout * &cache.n2).sum_axis(Axis(0));
    }
    let mut dn2 = dout.clone();
    scale_rows_by(&mut dn2, &layer.norm_ffn);
    let dr2 = rms_normalize_back(&dn2, &cache.n2, &cache.rms2);

    // r2 = h1 + act . W_down
    let mut dact = linear_back(
        &cache.act,
        &dr2,
        &layer.w_down,
        gl.as_deref_mut().map(|g| &mut g.w_down),
        ad(5),
        ga.as_deref_mut().map(|g| &mut g.down),
        scale,
    );
    Zip::from(&mut dact).and(&cache.pre).for_each(|d, &u| *d *= gelu_grad(u));
    let mut dh1 = linear_back(
        &cache.h1,
        &dact,
        &layer.w_up,
        gl.as_deref_mut().map(|g| &mut g.w_up),
        ad(4),
        ga.as_deref_mut().map(|g| &mut g.up),
        scale,
    );
    dh1 += &dr2;

    // h1 = n1 * g1
    if let Some(g) = gl.as_deref_mut() {
        g.norm_attn += &(&dh1 * &cache.n1).sum_axis(Axis(0));
    }
    let mut dn1 = dh1;
    scale_rows_by(&mut dn1, &layer.norm_attn);
    let dr1 = rms_normalize_back(&dn1, &cache.n1, &cache.rms1);

    // r1 = h + o . W_o
    let d_o = linear_back(
        &cache.o,
        &dr1,
        &layer.wo,
        gl.as_deref_mut().map(|g| &mut g.wo),
        ad(3),
        ga.as_deref_mut().map(|g| &mut g.o),
        scale,
    );
    let dhd = cfg.head_dim();
    let inv_sqrt = T::one() / T::c(dhd as f64).sqrt();
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for (j, p) in cache.probs.iter().enumerate() {
        let cols = s![.., j * dhd..(j + 1) * dhd];
        let do_j = d_o.slice(cols);
        let dp = do_j.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&do_j));
        let mut ds = dp;
        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: T = ds_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).sum();
            Zip::from(&mut ds_row).and(&p_row).for_each(|d, &pv| *d = pv * (*d - dot) * inv_sqrt);
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let mut dh = dr1;
    dh += &linear_back(
        &cache.h,
        &dq,
        &layer.wq,
        gl.as_deref_mut().map(|g| &mut g.wq),
        ad(0),
        ga.as_deref_mut().map(|g| &mut g.q),
        scale,
    );
    dh += &linear_back(
        &cache.h,
        &dk,
        &layer.wk,
        gl.as_deref_mut().map(|g| &mut g.wk),
        ad(1),
        ga.as_deref_mut().map(|g| &mut g.k),
        scale,
    );
    dh += &linear_back(
        &cache.h,
        &dv,
        &layer.wv,
        gl.map(|g| &mut g.wv),
        ad(2),
        ga.map(|g| &mut g.v),
        scale,
    );
    dh
}

fn trunk_forward<T: Scalar>(w: &Weights<'_, T>, mut h: Array2<T>, counter: &mut usize) -> Array2<T> {
    let scale = w.lora_scale();
    for (i, layer) in w.p.layers.iter().enumerate() {
        h = block_forward(w.cfg, layer, w.layer_adapters(i), scale, h).0;
        *counter += 1;
    }
    h
}

fn trunk_forward_cached<T: Scalar>(
    w: &Weights<'_, T>,
    mut h: Array2<T>,
    counter: &mut usize,
) -> (Array2<T>, Vec<BlockCache<T>>) {
    let scale = w.lora_scale();
    let mut caches = Vec::with_capacity(w.p.layers.len());
    for (i, layer) in w.p.layers.iter().enumerate() {
        let (out, cache) = block_forward(w.cfg, layer, w.layer_adapters(i), scale, h);
        caches.push(cache);
        h = out;
        *counter += 1;
    }
    (h, caches)
}

fn trunk_backward<T: Scalar>(
    w: &Weights<'_, T>,
    caches: &[BlockCache<T>],
    mut dh: Array2<T>,
    grads: &mut Gradients<T>,
    trainable: Trainable,
) -> Array2<T> {
    let scale = w.lora_scale();
    for (i, cache) in caches.iter().enumerate().rev() {
        let sink = GradSink {
            layer: trainable.trunk.then(|| &mut grads.params.layers[i]),
            adapters: if trainable.adapters {
                grads.adapters.as_mut().map(|a| &mut a.layers[i])
            } else {
                None
            },
        };
        dh = block_backward(w.cfg, &w.p.layers[i], w.layer_adapters(i), scale, cache, &dh, sink);
    }
    dh
}

fn color_pair_rows(colors: &crate::augment::ColorPermutation) -> impl Iterator<Item = usize> + '_ {
    colors
        .mapping()
        .iter()
        .enumerate()
        .map(|(from, &to)| from * NUM_COLORS + to as usize)
}

pub(super) fn augmentation_encoding<T: Scalar>(aug: &AugEncoders<T>, a: &Augmentation) -> Array1<T> {
    let mut v = aug.dihedral.row(a.dihedral.index() as usize).to_owned();
    for row in color_pair_rows(&a.colors) {
        v += &aug.color_pairs.row(row);
    }
    v += &aug.offset_x.row(a.translation.dx);
    v += &aug.offset_y.row(a.translation.dy);
    v
}

fn embed_scale<T: Scalar>(cfg: &ModelConfig) -> T {
    T::c((cfg.hidden_dim as f64).sqrt())
}

fn task_vector<T: Scalar>(w: &Weights<'_, T>, input: &ModelInput<'_>) -> Result<Array1<T>> {
    let rows = w.p.task_embeddings.nrows();
    if input.embedding_row >= rows {
        return Err(TrmError::IndexOutOfRange {
            index: input.embedding_row,
            rows,
        });
    }
    let mut v = w.p.task_embeddings.row(input.embedding_row).to_owned();
    if let Some(aug) = &w.p.aug {
        v += &augmentation_encoding(aug, &input.augmentation);
    }
    Ok(v)
}

fn embed_input<T: Scalar>(w: &Weights<'_, T>, input: &ModelInput<'_>) -> Result<Array2<T>> {
    if input.tokens.len() != w.cfg.seq_len() {
        return Err(TrmError::ModelConfig(format!(
            "{} tokens for a model with sequence length {}",
            input.tokens.len(),
            w.cfg.seq_len()
        )));
    }
    let task = task_vector(w, input)?;
    let scale = embed_scale::<T>(w.cfg);
    let mut x = w.p.position_embedding.clone();
    for (mut row, &tok) in x.rows_mut().into_iter().zip(input.tokens) {
        row += &w.p.token_embedding.row(tok as usize);
        row += &task;
        row *= scale;
    }
    Ok(x)
}

fn embed_backward<T: Scalar>(
    w: &Weights<'_, T>,
    input: &ModelInput<'_>,
    dx: &Array2<T>,
    grads: &mut ModelParams<T>,
    trainable: Trainable,
) {
    let scale = embed_scale::<T>(w.cfg);
    let dx = dx * scale;
    if trainable.trunk {
        for (row, &tok) in dx.rows().into_iter().zip(input.tokens) {
            let mut g = grads.token_embedding.row_mut(tok as usize);
            g += &row;
        }
        grads.position_embedding += &dx;
    }
    let dtask = dx.sum_axis(Axis(0));
    if trainable.embeddings {
        let mut g = grads.task_embeddings.row_mut(input.embedding_row);
        g += &dtask;
    }
    if trainable.trunk {
        if let Some(aug) = grads.aug.as_mut() {
            let a = &input.augmentation;
            let add = |m: &mut Array2<T>, r: usize| {
                let mut row = m.row_mut(r);
                row += &dtask;
            };
            add(&mut aug.dihedral, a.dihedral.index() as usize);
            for r in color_pair_rows(&a.colors) {
                add(&mut aug.color_pairs, r);
            }
            add(&mut aug.offset_x, a.translation.dx);
            add(&mut aug.offset_y, a.translation.dy);
        }
    }
}

fn heads<T: Scalar>(w: &Weights<'_, T>, y: &Array2<T>) -> (Array2<T>, T, Array1<T>) {
    let logits = y.dot(&w.p.output_head);
    let pooled = y.mean_axis(Axis(0)).expect("non-empty sequence");
    let halt = pooled.dot(&w.p.halt_head) + w.p.halt_bias[0];
    (logits, halt, pooled)
}

/// Runs `cycles` full higher cycles without recording anything.
fn run_cycles<T: Scalar>(
    w: &Weights<'_, T>,
    x: &Array2<T>,
    y: &mut Array2<T>,
    z: &mut Array2<T>,
    cycles: usize,
    counter: &mut usize,
) {
    for _ in 0..cycles {
        for _ in 0..w.cfg.lower_cycles {
            let zin = &*z + &*y + x;
            *z = trunk_forward(w, zin, counter);
        }
        let yin = &*y + &*z;
        *y = trunk_forward(w, yin, counter);
    }
}

struct CycleCache<T> {
    z_updates: Vec<Vec<BlockCache<T>>>,
    y_update: Vec<BlockCache<T>>,
}

fn run_final_cycle_cached<T: Scalar>(
    w: &Weights<'_, T>,
    x: &Array2<T>,
    y: &mut Array2<T>,
    z: &mut Array2<T>,
    counter: &mut usize,
) -> CycleCache<T> {
    let mut z_updates = Vec::with_capacity(w.cfg.lower_cycles);
    for _ in 0..w.cfg.lower_cycles {
        let zin = &*z + &*y + x;
        let (out, caches) = trunk_forward_cached(w, zin, counter);
        *z = out;
        z_updates.push(caches);
    }
    let yin = &*y + &*z;
    let (out, y_update) = trunk_forward_cached(w, yin, counter);
    *y = out;
    CycleCache { z_updates, y_update }
}

/// Gradient w.r.t. the scaled input embedding `x` through the last cycle,
/// given the gradient on its output `y`. The latents entering the cycle are
/// constants.
fn final_cycle_backward<T: Scalar>(
    w: &Weights<'_, T>,
    cache: &CycleCache<T>,
    dy: Array2<T>,
    grads: &mut Gradients<T>,
    trainable: Trainable,
) -> Array2<T> {
    let mut dz = trunk_backward(w, &cache.y_update, dy, grads, trainable);
    let mut dx = Array2::zeros(dz.dim());
    for caches in cache.z_updates.iter().rev() {
        let dzin = trunk_backward(w, caches, dz, grads, trainable);
        dx += &dzin;
        dz = dzin;
    }
    dx
}

fn check_finite<T: Scalar>(m: &Array2<T>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TrmError::NonFiniteActivation(what.to_string()))
    }
}

fn argmax(row: ArrayView1<'_, impl Scalar>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax token per position.
pub fn argmax_tokens<T: Scalar>(logits: &Array2<T>) -> Vec<u8> {
    logits.rows().into_iter().map(|r| argmax(r) as u8).collect()
}

/// Inference forward over a batch of inputs.
pub fn forward<T: Scalar>(state: &ModelState<T>, inputs: &[ModelInput<'_>]) -> Result<ForwardOutput<T>> {
    let w = Weights::of(state);
    let cfg = w.cfg;
    let mut out = ForwardOutput {
        logits: Vec::with_capacity(inputs.len()),
        halt_logits: Vec::with_capacity(inputs.len()),
        supervision_logits: Vec::with_capacity(inputs.len()),
        trunk_applications: 0,
    };
    for input in inputs {
        let x = embed_input(&w, input)?;
        let mut y = Array2::zeros(x.dim());
        let mut z = Array2::zeros(x.dim());
        let mut per_step = Vec::with_capacity(cfg.supervision_steps);
        let mut halts = Vec::with_capacity(cfg.supervision_steps);
        for _ in 0..cfg.supervision_steps {
            run_cycles(&w, &x, &mut y, &mut z, cfg.higher_cycles, &mut out.trunk_applications);
            let (logits, halt, _) = heads(&w, &y);
            check_finite(&logits, "output logits")?;
            per_step.push(logits);
            halts.push(halt);
            if cfg.halt_early && halt > T::zero() {
                break;
            }
        }
        out.logits.push(per_step.last().expect("at least one step").clone());
        out.halt_logits.push(halts);
        out.supervision_logits.push(per_step);
    }
    Ok(out)
}

/// Argmax canvas of the final (or halted) step and its halting probability.
pub fn predict_tokens<T: Scalar>(state: &ModelState<T>, input: &ModelInput<'_>) -> Result<(TokenCanvas, f64)> {
    let out = forward(state, std::slice::from_ref(input))?;
    let tokens = argmax_tokens(&out.logits[0]);
    let halt = out.halt_logits[0].last().copied().unwrap_or_else(T::zero);
    let p = 1.0 / (1.0 + (-halt.to_f64().unwrap_or(0.0)).exp());
    Ok((TokenCanvas::new(state.config.canvas_side, tokens)?, p))
}

/// Cross-entropy summed over positions, and its gradient w.r.t. the logits
/// scaled by `grad_scale`.
pub(crate) fn cell_loss_and_grad<T: Scalar>(logits: &Array2<T>, target: &[u8], grad_scale: T) -> (f64, Array2<T>) {
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &t) in grad.rows_mut().into_iter().zip(target) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row /= sum;
        loss -= row[t as usize].to_f64().expect("finite").ln();
        row[t as usize] -= T::one();
        row *= grad_scale;
    }
    (loss, grad)
}

/// Binary cross-entropy on a logit and its gradient.
pub(crate) fn halt_loss_and_grad(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - target * logit + (-logit.abs()).exp().ln_1p();
    let prob = 1.0 / (1.0 + (-logit).exp());
    (loss, prob - target)
}

fn zero_gradients<T: Scalar>(state: &ModelState<T>) -> Gradients<T> {
    Gradients {
        params: state.params.zeros_like(),
        adapters: state.adapters.as_ref().map(LoraAdapters::zeros_like),
    }
}

/// Loss, gradients and per-item exactness for one batch.
///
/// `cell` is the mean token cross-entropy over positions, supervision steps
/// and items; `halt` the mean binary cross-entropy of the halting logits
/// against "this step's argmax canvas equals the target". Gradients are zero
/// for every group not marked trainable.
pub fn compute_gradients<T: Scalar>(
    state: &ModelState<T>,
    inputs: &[ModelInput<'_>],
    targets: &[&[u8]],
    trainable: Trainable,
) -> Result<(LossBreakdown, Gradients<T>, BatchStats)> {
    assert_eq!(inputs.len(), targets.len(), "one target per input");
    let w = Weights::of(state);
    let cfg = w.cfg;
    let mut grads = zero_gradients(state);
    let mut stats = BatchStats::default();
    let n_items = inputs.len().max(1) as f64;
    let n_steps = cfg.supervision_steps as f64;
    let seq = cfg.seq_len() as f64;
    let cell_scale = T::c(1.0 / (n_items * n_steps * seq));
    let halt_scale = 1.0 / (n_items * n_steps);
    let mut cell_sum = 0.0;
    let mut halt_sum = 0.0;
    let mut counter = 0;

    for (input, target) in inputs.iter().zip(targets) {
        let x = embed_input(&w, input)?;
        let mut y = Array2::zeros(x.dim());
        let mut z = Array2::zeros(x.dim());
        let mut dx_total = Array2::<T>::zeros(x.dim());
        let mut exact = false;
        for _ in 0..cfg.supervision_steps {
            run_cycles(&w, &x, &mut y, &mut z, cfg.higher_cycles - 1, &mut counter);
            let cache = run_final_cycle_cached(&w, &x, &mut y, &mut z, &mut counter);
            let (logits, halt, pooled) = heads(&w, &y);
            check_finite(&logits, "output logits")?;

            exact = argmax_tokens(&logits).as_slice() == *target;
            let (cell, dlogits) = cell_loss_and_grad(&logits, target, cell_scale);
            let halt_f = halt.to_f64().expect("finite");
            let (hl, dh) = halt_loss_and_grad(halt_f, if exact { 1.0 } else { 0.0 });
            cell_sum += cell;
            halt_sum += hl;
            let dh = T::c(dh * halt_scale);

            let mut dy = dlogits.dot(&w.p.output_head.t());
            let pooled_grad = &w.p.halt_head * (dh / T::c(seq));
            for mut row in dy.rows_mut() {
                row += &pooled_grad;
            }
            if trainable.trunk {
                general_mat_mul(T::one(), &y.t(), &dlogits, T::one(), &mut grads.params.output_head);
                grads.params.halt_head.scaled_add(dh, &pooled);
                grads.params.halt_bias[0] += dh;
            }
            dx_total += &final_cycle_backward(&w, &cache, dy, &mut grads, trainable);
        }
        embed_backward(&w, input, &dx_total, &mut grads.params, trainable);
        stats.exact.push(exact);
    }

    let cell = cell_sum / (n_items * n_steps * seq);
    let halt = halt_sum / (n_items * n_steps);
    let loss = LossBreakdown {
        total: cell + halt,
        cell,
        halt,
    };
    if !loss.total.is_finite() {
        return Err(TrmError::NonFiniteLoss(format!("cell {cell}, halt {halt}")));
    }
    for (name, _, t) in grads.params.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(TrmError::NonFiniteGradient(name));
        }
    }
    if let Some(a) = &grads.adapters {
        if a.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(TrmError::NonFiniteGradient("lora adapters".into()));
        }
    }
    Ok((loss, grads, stats))
}

/// Helpers for finite-difference gradient checks.
///
/// The training loss treats the latents entering each supervision step's
/// last cycle as constants. [`trace_entry_latents`] records them for an
/// unperturbed model and [`loss_with_entry_latents`] evaluates the loss with
/// them held fixed, which is the function whose exact gradient
/// [`compute_gradients`] returns.
pub mod gradcheck {
    use super::*;

    /// Per item, per supervision step: `(y, z)` entering the last cycle.
    pub type EntryLatents<T> = Vec<Vec<(Array2<T>, Array2<T>)>>;

    pub fn trace_entry_latents<T: Scalar>(state: &ModelState<T>, inputs: &[ModelInput<'_>]) -> Result<EntryLatents<T>> {
        let w = Weights::of(state);
        let cfg = w.cfg;
        let mut counter = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for input in inputs {
            let x = embed_input(&w, input)?;
            let mut y = Array2::zeros(x.dim());
            let mut z = Array2::zeros(x.dim());
            let mut steps = Vec::with_capacity(cfg.supervision_steps);
            for _ in 0..cfg.supervision_steps {
                run_cycles(&w, &x, &mut y, &mut z, cfg.higher_cycles - 1, &mut counter);
                steps.push((y.clone(), z.clone()));
                run_cycles(&w, &x, &mut y, &mut z, 1, &mut counter);
            }
            out.push(steps);
        }
        Ok(out)
    }

    /// Total loss with fixed entry latents and fixed halting targets.
    pub fn loss_with_entry_latents<T: Scalar>(
        state: &ModelState<T>,
        inputs: &[ModelInput<'_>],
        targets: &[&[u8]],
        entries: &EntryLatents<T>,
        halt_targets: &[Vec<f64>],
    ) -> Result<f64> {
        let w = Weights::of(state);
        let cfg = w.cfg;
        let mut counter = 0;
        let n_items = inputs.len() as f64;
        let n_steps = cfg.supervision_steps as f64;
        let seq = cfg.seq_len() as f64;
        let (mut cell, mut halt) = (0.0, 0.0);
        for (i, input) in inputs.iter().enumerate() {
            let x = embed_input(&w, input)?;
            for (s, (y0, z0)) in entries[i].iter().enumerate() {
                let (mut y, mut z) = (y0.clone(), z0.clone());
                run_cycles(&w, &x, &mut y, &mut z, 1, &mut counter);
                let (logits, h, _) = heads(&w, &y);
                cell += cell_loss_and_grad(&logits, targets[i], T::one()).0;
                halt += halt_loss_and_grad(h.to_f64().expect("finite"), halt_targets[i][s]).0;
            }
        }
        Ok(cell / (n_items * n_steps * seq) + halt / (n_items * n_steps))
    }

    /// Halting targets the training loss would use (argmax exactness per step).
    pub fn halt_targets<T: Scalar>(
        state: &ModelState<T>,
        inputs: &[ModelInput<'_>],
        targets: &[&[u8]],
        entries: &EntryLatents<T>,
    ) -> Result<Vec<Vec<f64>>> {
        let w = Weights::of(state);
        let mut counter = 0;
        let mut out = Vec::new();
        for (i, input) in inputs.iter().enumerate() {
            let x = embed_input(&w, input)?;
            let mut per = Vec::new();
            for (y0, z0) in &entries[i] {
                let (mut y, mut z) = (y0.clone(), z0.clone());
                run_cycles(&w, &x, &mut y, &mut z, 1, &mut counter);
                let (logits, _, _) = heads(&w, &y);
                per.push(if argmax_tokens(&logits).as_slice() == targets[i] { 1.0 } else { 0.0 });
            }
            out.push(per);
        }
        Ok(out)
    }
}
