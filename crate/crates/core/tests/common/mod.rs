#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trm_core::augment::{Augmentation, ColorPermutation, DihedralElement, Translation};
use trm_core::dataset::{ExamplePair, Task, TestExample};
use trm_core::grid::Grid;
use trm_core::model::gradcheck::{halt_targets, loss_with_entry_latents, trace_entry_latents};
use trm_core::model::{compute_gradients, EmbeddingMode, ModelConfig, ModelInput, ModelState, ParamGroup, Trainable};

pub fn random_grid(rng: &mut impl Rng, max_side: usize) -> Grid {
    let h = rng.random_range(1..=max_side);
    let w = rng.random_range(1..=max_side);
    let cells = (0..h * w).map(|_| rng.random_range(0..10)).collect();
    Grid::new(h, w, cells).unwrap()
}

/// A grid with roughly half background cells, at least 2x2.
pub fn sparse_grid(rng: &mut impl Rng, max_side: usize) -> Grid {
    let h = rng.random_range(2..=max_side);
    let w = rng.random_range(2..=max_side);
    let cells = (0..h * w)
        .map(|_| if rng.random_bool(0.5) { 0 } else { rng.random_range(1..10) })
        .collect();
    Grid::new(h, w, cells).unwrap()
}

/// Background-preserving cyclic color shift by `shift` over colors 1..=9.
pub fn color_shift(shift: u8) -> ColorPermutation {
    ColorPermutation::new(std::array::from_fn(|c| {
        if c == 0 {
            0
        } else {
            ((c as u8 - 1 + shift) % 9) + 1
        }
    }))
    .unwrap()
}

/// A task whose outputs are `colors` applied to `dihedral` of random inputs.
pub fn transform_task(
    id: &str,
    dihedral: DihedralElement,
    colors: ColorPermutation,
    n_train: usize,
    n_test: usize,
    max_side: usize,
    rng: &mut impl Rng,
) -> Task {
    let mut pair = || {
        let input = sparse_grid(rng, max_side);
        ExamplePair {
            output: colors.apply(&dihedral.apply(&input)),
            input,
        }
    };
    let train_pairs = (0..n_train).map(|_| pair()).collect();
    let test_examples = (0..n_test)
        .map(|_| {
            let p = pair();
            TestExample {
                input: p.input,
                output: Some(p.output),
            }
        })
        .collect();
    Task {
        task_id: id.to_string(),
        train_pairs,
        test_examples,
    }
}

pub fn toy_config(mode: EmbeddingMode, higher: usize, steps: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        embed_dim: 16,
        n_heads: 2,
        n_trunk_layers: 2,
        ffn_expansion: 2,
        lower_cycles: 2,
        higher_cycles: higher,
        supervision_steps: steps,
        canvas_side: 2,
        embedding_mode: mode,
        halt_early: false,
    }
}

/// Scales parameters up and jitters them so activations and gradients sit
/// well away from zero.
pub fn roughen(state: &mut ModelState<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in state.params.tensors_mut() {
        for x in t.iter_mut() {
            *x = *x * 10.0 + rng.random_range(-0.1..0.1);
        }
    }
    if let Some(a) = state.adapters.as_mut() {
        for (_, t) in a.tensors_mut() {
            for x in t.iter_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn flat(state: &mut ModelState<f64>, trainable: Trainable) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    for (group, t) in state.params.tensors_mut() {
        let on = match group {
            ParamGroup::Trunk => trainable.trunk,
            ParamGroup::TaskEmbedding => trainable.embeddings,
            ParamGroup::Adapter => trainable.adapters,
        };
        if on {
            out.extend(t.iter_mut());
        }
    }
    if trainable.adapters {
        if let Some(a) = state.adapters.as_mut() {
            for (_, t) in a.tensors_mut() {
                out.extend(t.iter_mut());
            }
        }
    }
    out
}

pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude central differences are dominated by rounding in the
/// loss, so the error is measured against this floor instead.
pub const GRAD_FLOOR: f64 = 1e-5;

pub struct GradCheck {
    pub coordinates: usize,
    pub significant: usize,
    pub worst_relative_error: f64,
}

/// Compares analytic gradients with fourth-order central differences of the
/// loss (latents entering each step's last cycle held fixed) on random
/// coordinates.
pub fn gradient_check(mut state: ModelState<f64>, trainable: Trainable, coordinates: usize, seed: u64) -> GradCheck {
    let tokens: Vec<Vec<u8>> = vec![vec![3, 1, 0, 7], vec![10, 2, 2, 0]];
    let targets: Vec<Vec<u8>> = vec![vec![4, 4, 1, 0], vec![1, 5, 9, 2]];
    let augs = [
        Augmentation::new(DihedralElement::new(6).unwrap(), ColorPermutation::swap(1, 4), Translation { dx: 1, dy: 0 }),
        Augmentation::IDENTITY,
    ];
    let inputs: Vec<ModelInput<'_>> = tokens
        .iter()
        .zip(augs)
        .enumerate()
        .map(|(i, (t, a))| ModelInput {
            tokens: t,
            embedding_row: i,
            augmentation: a,
        })
        .collect();
    let target_refs: Vec<&[u8]> = targets.iter().map(Vec::as_slice).collect();

    let entries = trace_entry_latents(&state, &inputs).unwrap();
    let halts = halt_targets(&state, &inputs, &target_refs, &entries).unwrap();
    let (loss, grads, _) = compute_gradients(&state, &inputs, &target_refs, trainable).unwrap();
    let reference = loss_with_entry_latents(&state, &inputs, &target_refs, &entries, &halts).unwrap();
    assert!((loss.total - reference).abs() < 1e-12, "{} vs {reference}", loss.total);

    let mut grad_state = state.clone();
    grad_state.params = grads.params;
    grad_state.adapters = grads.adapters;
    let analytic: Vec<f64> = flat(&mut grad_state, trainable).into_iter().map(|g| *g).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut significant = 0;
    for _ in 0..coordinates {
        let k = rng.random_range(0..analytic.len());
        let original = *flat(&mut state, trainable)[k];
        let mut at = |offset: f64| {
            *flat(&mut state, trainable)[k] = original + offset;
            loss_with_entry_latents(&state, &inputs, &target_refs, &entries, &halts).unwrap()
        };
        let numeric = (at(-2.0 * FD_STEP) - 8.0 * at(-FD_STEP) + 8.0 * at(FD_STEP) - at(2.0 * FD_STEP)) / (12.0 * FD_STEP);
        *flat(&mut state, trainable)[k] = original;
        let rel = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(GRAD_FLOOR);
        if analytic[k].abs() > GRAD_FLOOR {
            significant += 1;
        }
        worst = worst.max(rel);
    }
    GradCheck {
        coordinates,
        significant,
        worst_relative_error: worst,
    }
}
