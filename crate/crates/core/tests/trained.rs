//! Behaviour of models trained at the toy configuration on phantoms.

use std::collections::BTreeSet;

use mmseg::data::{derive_regions, generate_phantoms, make_folds, select_modalities, LabelVolume, MultiModalVolume, Region, Subject};
use mmseg::evaluation::{dice, sliding_window_predict, FoldId};
use mmseg::missingness::ModalityMask;
use mmseg::nets::build_model;
use mmseg::pipeline::{evaluate_models, prepare, pretrain_shared_paths, split_fold, train_variant, ExperimentConfig, Variant};
use mmseg::training::{derive_seed, pretrain_paths, train, TrainConfig};

fn phantoms(seed: u64, n: usize) -> Vec<Subject> {
    prepare(generate_phantoms(seed, n, 48, 4).unwrap()).unwrap()
}

#[test]
fn loss_descends_for_every_variant_family() {
    let cfg = ExperimentConfig::toy();
    let data = phantoms(30, 6);
    for seed in 0..3u64 {
        for variant in [Variant::Unet, Variant::Dropout, Variant::SharedRep] {
            let mut model = build_model(&cfg.network(variant, 4), seed).unwrap();
            let train_cfg = TrainConfig {
                epochs: 5,
                seed,
                dropout_schedule: (variant != Variant::Unet).then_some(cfg.dropout_schedule),
                ..cfg.train.clone()
            };
            let outcome = train(&mut model, &data, &train_cfg, None).unwrap();
            let first = outcome.history[0].mean_loss;
            let last = outcome.history.last().unwrap().mean_loss;
            assert!(last < first, "{variant:?} seed {seed}: {first} → {last}");
            assert_eq!(outcome.patches_consumed, 5 * train_cfg.batches_per_epoch * train_cfg.batch_size);
        }
    }
}

#[test]
fn pretrained_paths_segment_from_their_modality() {
    let cfg = ExperimentConfig::toy();
    let train_set = phantoms(31, 20);
    let test_set = phantoms(32, 2);
    let template = cfg.network(Variant::MultipathPretrained, 4);
    let paths = pretrain_paths(&train_set, &cfg.train, &cfg.pretrain, &template, template.pathway_head_width_factor, None, false).unwrap();
    assert_eq!(paths.len(), 4);
    // T2W and FLAIR outline the whole tumor in the phantoms
    for channel in [2usize, 3] {
        let (model, _) = &paths[channel];
        assert_eq!(model.config().num_modalities, 1);
        let mut model = model.clone();
        let mut scores = Vec::new();
        for s in &test_set {
            let single = select_modalities(s, &[channel]).unwrap();
            let pred = sliding_window_predict(&mut model, &single.volume, &ModalityMask::all(1), cfg.eval_input_side).unwrap();
            let [wt_pred, ..] = derive_regions(&pred);
            let [wt_true, ..] = derive_regions(&s.labels);
            assert_eq!(wt_pred.region, Region::WholeTumor);
            scores.push(dice(&wt_pred, &wt_true).unwrap());
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!(mean > 0.5, "path {channel} WholeTumor Dice {mean:.3}");
    }

    // background-only input is predicted as background almost everywhere
    let (model, _) = &paths[3];
    let mut model = model.clone();
    let dims = [48; 3];
    let n = 48 * 48 * 48;
    let blank = MultiModalVolume::new("blank", dims, vec![0.0; n], vec!["FLAIR".into()], 0.0).unwrap();
    let pred = sliding_window_predict(&mut model, &blank, &ModalityMask::all(1), cfg.eval_input_side).unwrap();
    let background = pred.labels.iter().filter(|&&l| l == 0).count() as f64 / n as f64;
    assert!(background > 0.95, "background fraction {background:.3}");
    let labels: BTreeSet<u8> = pred.labels.iter().copied().collect();
    assert!(labels.is_subset(&[0, 1, 2, 4].into_iter().collect()));
    let _ = LabelVolume::new(dims, pred.labels).unwrap();
}

#[test]
fn pretrained_multipath_does_best_with_every_modality() {
    let cfg = ExperimentConfig::toy();
    let names = mmseg::data::default_modality_names();
    let mut subsets = vec![ModalityMask::all(4)];
    subsets.extend((0..4).map(|i| ModalityMask::from_indices(4, &[i]).unwrap()));
    let mut sums = vec![0.0f64; subsets.len()];
    for seed in 0..3u64 {
        let subjects = prepare(generate_phantoms(derive_seed(seed, 1), 25, 48, 4).unwrap()).unwrap();
        let ids: Vec<String> = subjects.iter().map(|s| s.id().to_string()).collect();
        let split = make_folds(&ids, 5, cfg.fold_seed).unwrap();
        let (train_set, test_set) = split_fold(&subjects, &split, 0).unwrap();
        let training_ids: BTreeSet<String> = train_set.iter().map(|s| s.id().to_string()).collect();
        let paths = pretrain_shared_paths(&train_set, &cfg, seed, None).unwrap();
        let mut models = train_variant(Variant::MultipathPretrained, &train_set, &cfg, seed, None, Some(&paths), &[]).unwrap();
        let report = evaluate_models(&mut models, &test_set, &subsets, &training_ids, cfg.eval_input_side, FoldId::Fold(0), seed).unwrap();
        for (sum, mask) in sums.iter_mut().zip(&subsets) {
            let name = mask.name(&names);
            *sum += report
                .rows
                .iter()
                .find(|r| r.region == Region::WholeTumor && r.subset == name)
                .unwrap()
                .mean_dice;
        }
    }
    for (mask, sum) in subsets.iter().zip(&sums).skip(1) {
        assert!(sums[0] >= *sum, "All {:.3} < {} {:.3}", sums[0] / 3.0, mask.name(&names), sum / 3.0);
    }
}
