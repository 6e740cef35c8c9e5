mod common;

use common::{gradient_check, roughen, toy_config};
use trm_core::augment::Augmentation;
use trm_core::model::{
    compute_gradients, init_model, EmbeddingMode, LoraAdapters, ModelInput, ModelState, ParamGroup, Trainable,
};

const COORDS: usize = 240;

fn assert_close(state: ModelState<f64>, trainable: Trainable, seed: u64) {
    let r = gradient_check(state, trainable, COORDS, seed);
    println!(
        "worst relative error over {} coordinates ({} above the floor): {:.2e}",
        r.coordinates, r.significant, r.worst_relative_error
    );
    assert!(r.worst_relative_error < 1e-4);
    assert!(r.significant >= COORDS / 2, "only {} coordinates carry a measurable gradient", r.significant);
}

#[test]
fn full_graph_matches_finite_differences() {
    let mut state = init_model::<f64>(&toy_config(EmbeddingMode::PerVariant, 1, 1), 2, 7);
    roughen(&mut state, 1);
    assert_close(state, Trainable::ALL, 11);
}

#[test]
fn recursive_steps_match_finite_differences() {
    let mut state = init_model::<f64>(&toy_config(EmbeddingMode::PerVariant, 2, 3), 2, 8);
    roughen(&mut state, 2);
    assert_close(state, Trainable::ALL, 12);
}

#[test]
fn explicit_encoders_match_finite_differences() {
    let mut state = init_model::<f64>(&toy_config(EmbeddingMode::Explicit, 1, 2), 2, 9);
    roughen(&mut state, 3);
    assert_close(state, Trainable::ALL, 13);
}

#[test]
fn adapters_match_finite_differences() {
    let cfg = toy_config(EmbeddingMode::PerVariant, 1, 2);
    let mut state = init_model::<f64>(&cfg, 2, 10);
    state.adapters = Some(LoraAdapters::new(&cfg, 3, 6.0, 4));
    roughen(&mut state, 4);
    assert_close(state, Trainable::LORA, 14);
}

#[test]
fn frozen_trunk_has_zero_gradient() {
    let state = init_model::<f64>(&toy_config(EmbeddingMode::PerVariant, 1, 2), 2, 1);
    let tokens = [1u8, 2, 3, 4];
    let input = ModelInput {
        tokens: &tokens,
        embedding_row: 1,
        augmentation: Augmentation::IDENTITY,
    };
    let (_, grads, _) = compute_gradients(&state, &[input], &[&tokens], Trainable::EMBEDDINGS_ONLY).unwrap();
    for (name, group, t) in grads.params.tensors() {
        if group == ParamGroup::Trunk {
            assert!(t.iter().all(|&g| g == 0.0), "{name}");
        }
    }
    assert!(grads.params.task_embeddings.row(1).iter().any(|&g| g != 0.0));
    assert!(grads.params.task_embeddings.row(0).iter().all(|&g| g == 0.0));
}

#[test]
fn duplicated_item_gives_the_same_mean_gradient() {
    let state = init_model::<f64>(&toy_config(EmbeddingMode::PerVariant, 2, 2), 1, 3);
    let tokens = [5u8, 0, 1, 9];
    let target = [6u8, 1, 1, 2];
    let input = ModelInput {
        tokens: &tokens,
        embedding_row: 0,
        augmentation: Augmentation::IDENTITY,
    };
    let (l1, g1, _) = compute_gradients(&state, &[input], &[&target], Trainable::ALL).unwrap();
    let (l2, g2, _) = compute_gradients(&state, &[input, input], &[&target, &target], Trainable::ALL).unwrap();
    assert!((l1.total - l2.total).abs() < 1e-12);
    for ((name, _, a), (_, _, b)) in g1.params.tensors().into_iter().zip(g2.params.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}: {x} vs {y}");
        }
    }
}
