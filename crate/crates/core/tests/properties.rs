use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trm_core::augment::{
    apply_augmentation, invert_augmentation, sample_augmentations, Augmentation, AugmentationSpace, ColorPermutation,
    DihedralElement, GridExtent, Translation,
};
use trm_core::dataset::{build_registry, VariantRegistry};
use trm_core::diagnostics::cosine_report;
use trm_core::grid::{canonical_digest, decode_grid, encode_grid, Grid, TokenCanvas, CANVAS_LEN, CANVAS_SIDE};
use trm_core::model::{init_model, Checkpoint, EmbeddingMode, LoraAdapters, ModelConfig};
use trm_core::posttrain::plan_budget;
use trm_core::vote::{vote, Prediction};

fn grid(max_side: usize) -> impl Strategy<Value = Grid> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u8..10, h * w).prop_map(move |cells| Grid::new(h, w, cells).unwrap())
    })
}

fn dihedral() -> impl Strategy<Value = DihedralElement> {
    (0u8..8).prop_map(|i| DihedralElement::new(i).unwrap())
}

fn permutation() -> impl Strategy<Value = ColorPermutation> {
    Just((0u8..10).collect::<Vec<_>>())
        .prop_shuffle()
        .prop_map(|m| ColorPermutation::new(m.try_into().unwrap()).unwrap())
}

proptest! {
    #[test]
    fn encoding_round_trips(g in grid(CANVAS_SIDE)) {
        prop_assert_eq!(decode_grid(&encode_grid(&g)), g);
    }

    #[test]
    fn encoding_is_injective(a in grid(6), b in grid(6)) {
        prop_assert_eq!(encode_grid(&a) == encode_grid(&b), a == b);
    }

    #[test]
    fn decoding_is_total(tokens in proptest::collection::vec(0u8..11, CANVAS_LEN)) {
        let g = decode_grid(&TokenCanvas::new(CANVAS_SIDE, tokens).unwrap());
        prop_assert!(g.height() >= 1 && g.width() >= 1);
        prop_assert!(g.height() <= CANVAS_SIDE && g.width() <= CANVAS_SIDE);
        prop_assert!(g.cells().iter().all(|&c| c < 10));
    }

    #[test]
    fn dihedral_inverse(g in grid(12), d in dihedral()) {
        prop_assert_eq!(d.inverse().apply(&d.apply(&g)), g);
    }

    #[test]
    fn color_inverse(g in grid(12), p in permutation()) {
        prop_assert_eq!(p.inverse().apply(&p.apply(&g)), g.clone());
        for c in 0..10u8 {
            prop_assert_eq!(p.inverse().map(p.map(c)), c);
        }
    }

    #[test]
    fn untranslated_augmentation_preserves_cell_count(g in grid(12), d in dihedral(), p in permutation()) {
        let placed = apply_augmentation(&g, &Augmentation::new(d, p, Translation::default())).unwrap();
        prop_assert_eq!(placed.grid.cells().len(), g.cells().len());
    }

    #[test]
    fn pair_relationship_survives_augmentation(
        g in grid(10),
        d in dihedral(),
        p in permutation(),
        dx in 0usize..20,
        dy in 0usize..20,
    ) {
        // output = horizontal flip of the input, before augmentation
        let output = DihedralElement::FLIP_H.apply(&g);
        let aug = Augmentation::new(d, p, Translation { dx, dy });
        let inverse = invert_augmentation(&aug);
        let placed_in = apply_augmentation(&g, &aug).unwrap();
        let placed_out = apply_augmentation(&output, &aug).unwrap();
        let back_in = inverse.apply_to_canvas(&placed_in.to_canvas(CANVAS_SIDE).unwrap());
        let back_out = inverse.apply_to_canvas(&placed_out.to_canvas(CANVAS_SIDE).unwrap());
        prop_assert_eq!(DihedralElement::FLIP_H.apply(&back_in), back_out);
    }

    #[test]
    fn sampled_augmentations_fit_and_start_at_identity(
        seed in any::<u64>(),
        h in 1usize..=30,
        w in 1usize..=30,
        n in 1usize..200,
    ) {
        let extent = GridExtent { max_height: h, max_width: w };
        let augs = sample_augmentations(seed, n, &extent, &AugmentationSpace::default()).unwrap();
        prop_assert_eq!(augs.len(), n);
        prop_assert!(augs[0].is_identity());
        let probe = Grid::filled(h, w, 1).unwrap();
        for a in &augs {
            prop_assert!(apply_augmentation(&probe, a).is_ok());
        }
        let shorter = sample_augmentations(seed, n / 2 + 1, &extent, &AugmentationSpace::default()).unwrap();
        prop_assert_eq!(&augs[..shorter.len()], &shorter[..]);
    }

    #[test]
    fn registry_round_trips(n_tasks in 1usize..12, augs in 1usize..9, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n_tasks).map(|i| format!("task-{i}")).collect();
        let extent = GridExtent { max_height: 5, max_width: 7 };
        let registry = build_registry(ids.iter().map(|id| (id.as_str(), extent)), augs, seed, &AugmentationSpace::default()).unwrap();
        prop_assert_eq!(registry.n_entries(), n_tasks * augs);
        let mut next = 0;
        for t in 0..n_tasks {
            let range = registry.variants(t);
            prop_assert_eq!(range.start, next);
            next = range.end;
            prop_assert_eq!(registry.base_index(t), range.start);
        }
        prop_assert_eq!(next, registry.n_entries());
        let back = VariantRegistry::from_bytes(&registry.to_bytes()).unwrap();
        prop_assert_eq!(back.digest(), registry.digest());
        prop_assert_eq!(back, registry);
    }

    #[test]
    fn vote_ignores_prediction_order(picks in proptest::collection::vec(0usize..4, 1..30), seed in any::<u64>()) {
        let pool = [
            Grid::from_rows(&[[1u8]]).unwrap(),
            Grid::from_rows(&[[2u8, 3]]).unwrap(),
            Grid::from_rows(&[[4u8], [5]]).unwrap(),
            Grid::from_rows(&[[0u8]]).unwrap(),
        ];
        let mut predictions: Vec<Prediction> = picks
            .iter()
            .map(|&i| Prediction {
                augmentation: Augmentation::IDENTITY,
                grid: pool[i].clone(),
                digest: canonical_digest(&pool[i]),
                halt_confidence: 1.0,
            })
            .collect();
        let before = vote(&predictions).unwrap();
        rand::seq::SliceRandom::shuffle(&mut predictions[..], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(vote(&predictions).unwrap(), before);
    }

    #[test]
    fn budget_is_monotone(
        wall in 2.0f64..48.0,
        reserved in 0.0f64..1.0,
        extra in 0.0f64..1.0,
        step in 0.1f64..30.0,
        slower in 0.0f64..5.0,
    ) {
        let base = plan_budget(wall, reserved, step).unwrap();
        prop_assert!(plan_budget(wall, reserved + extra, step).unwrap() <= base);
        prop_assert!(plan_budget(wall, reserved, step + slower).unwrap() <= base);
    }

    #[test]
    fn cosine_means_are_bounded(rows in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 4)) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f32>() > 1e-6));
        let table = ndarray::Array2::from_shape_vec((4, 3), rows.concat()).unwrap();
        let report = cosine_report(0, &table, &[("a", 0), ("a", 1), ("b", 2), ("b", 3)], &[0, 2]).unwrap();
        for value in [report.cos_within.unwrap(), report.cos_across.unwrap()] {
            prop_assert!((-1.0..=1.0).contains(&value));
        }
    }
}

#[test]
fn checkpoint_round_trips_with_adapters() {
    let config = ModelConfig {
        embedding_mode: EmbeddingMode::Explicit,
        ..ModelConfig::desk()
    };
    let mut state = init_model::<f32>(&config, 5, 2);
    state.adapters = Some(LoraAdapters::new(&config, 4, 8.0, 3));
    let ckpt = Checkpoint {
        state,
        registry_digest: Some(42),
    };
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(back, ckpt);
}

#[test]
fn checkpoint_files_check_the_registry() {
    use trm_core::model::{load_checkpoint, save_checkpoint};
    use trm_core::TrmError;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = Checkpoint {
        state: init_model::<f32>(&ModelConfig::desk(), 3, 1),
        registry_digest: Some(7),
    };
    save_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(load_checkpoint(&path, Some(7)).unwrap(), ckpt);
    assert_eq!(load_checkpoint(&path, None).unwrap(), ckpt);
    assert!(matches!(load_checkpoint(&path, Some(8)), Err(TrmError::ContinuedPretrainMappingLost(_))));
}
