use trm_core::augment::AugmentationSpace;
use trm_core::dataset::{build_registry, ExamplePair, Split, Task, TestExample};
use trm_core::grid::{Grid, TokenCanvas};
use trm_core::model::{EmbeddingMode, ModelInput};
use trm_core::vote::{predict_augmented, score_pass_at_k, submission_json, Predictor, TaskVotes};
use trm_core::{Result, TrmError};

/// Echoes its input canvas.
struct Echo;

impl Predictor for Echo {
    fn canvas_side(&self) -> usize {
        30
    }

    fn embedding_mode(&self) -> EmbeddingMode {
        EmbeddingMode::PerVariant
    }

    fn predict(&self, inputs: &[ModelInput<'_>]) -> Result<Vec<(TokenCanvas, f64)>> {
        inputs
            .iter()
            .map(|i| Ok((TokenCanvas::new(30, i.tokens.to_vec())?, 0.5)))
            .collect()
    }
}

fn g(rows: &[&[u8]]) -> Grid {
    Grid::from_rows(rows).unwrap()
}

fn task(id: &str, input: Grid, output: Grid) -> Task {
    Task {
        task_id: id.into(),
        train_pairs: vec![ExamplePair {
            input: input.clone(),
            output: output.clone(),
        }],
        test_examples: vec![TestExample {
            input,
            output: Some(output),
        }],
    }
}

/// Four tasks, one of which maps its test input to itself.
fn fixture() -> Split {
    Split::new(
        "stub",
        vec![
            task("a", g(&[&[1, 2], &[3, 4]]), g(&[&[1, 2], &[3, 4]])),
            task("b", g(&[&[1, 2], &[3, 4]]), g(&[&[4, 3], &[2, 1]])),
            task("c", g(&[&[5, 0, 5]]), g(&[&[5], &[0], &[5]])),
            task("d", g(&[&[7]]), g(&[&[8]])),
        ],
    )
    .unwrap()
}

fn votes(split: &Split, augs_per_task: usize, n: usize) -> Vec<TaskVotes> {
    let registry = build_registry(
        split.tasks.iter().map(|t| (t.task_id.as_str(), t.extent())),
        augs_per_task,
        1,
        &AugmentationSpace::default(),
    )
    .unwrap();
    split
        .tasks
        .iter()
        .map(|t| TaskVotes::from_predictions(&predict_augmented(&Echo, &registry, t, n).unwrap(), false).unwrap())
        .collect()
}

#[test]
fn identity_stub_scores_the_fixed_point_fraction() {
    let split = fixture();
    let results = votes(&split, 16, 16);
    for r in &results {
        assert_eq!(r.examples[0].ranked.len(), 1, "every augmented echo maps back to the input");
        assert_eq!(r.examples[0].total_count(), 16);
    }
    assert_eq!(score_pass_at_k(&results, &split, 1).unwrap(), 0.25);
    assert_eq!(score_pass_at_k(&results, &split, 2).unwrap(), 0.25);
}

#[test]
fn agreeing_stub_votes_alike_at_256_and_512() {
    let split = fixture();
    let small = votes(&split, 512, 256);
    let large = votes(&split, 512, 512);
    for (a, b) in small.iter().zip(&large) {
        assert_eq!(a.examples[0].top2(), b.examples[0].top2());
    }
    assert_eq!(submission_json(&small), submission_json(&large));
}

#[test]
fn too_many_augmentations_are_rejected() {
    let split = fixture();
    let registry = build_registry(
        split.tasks.iter().map(|t| (t.task_id.as_str(), t.extent())),
        4,
        1,
        &AugmentationSpace::default(),
    )
    .unwrap();
    let err = predict_augmented(&Echo, &registry, &split.tasks[0], 5).unwrap_err();
    assert!(matches!(err, TrmError::InsufficientAugmentationSpace { requested: 5, .. }));
}

#[test]
fn submission_lists_two_attempts_per_test_input() {
    let split = fixture();
    let json = submission_json(&votes(&split, 4, 4));
    let a = &json["a"][0];
    assert_eq!(a["attempt_1"], serde_json::json!([[1, 2], [3, 4]]));
    assert_eq!(a["attempt_2"], a["attempt_1"]);
    assert_eq!(json.as_object().unwrap().len(), 4);
}
