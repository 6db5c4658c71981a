use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array3;
use prostate_seg::augment::AugmentPolicy;
use prostate_seg::config::{DscMode, TrainConfig};
use prostate_seg::preprocess::volume_to_samples;
use prostate_seg::protocol::evaluate::{evaluate_model, mean_dsc};
use prostate_seg::protocol::run::CaseData;
use prostate_seg::protocol::{build_matrix, ingest, make_split, split, train_model, train_source, RunRoot, Source};
use prostate_seg::synthetic::generate_benchmark;
use prostate_seg::unet::{ModelSpec, UNet};
use prostate_seg::volume_io::{build_manifest, DatasetId, ManifestOptions, MaskVolume, Volume};
use prostate_seg::volume_io::Layout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(resolution: usize, epochs1: usize, epochs2: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.preprocess.resolution = resolution;
    cfg.preprocess.clahe_grid = (2, 2);
    cfg.model = ModelSpec {
        depth: 2,
        base_channels: 8,
        norm_groups: 4,
        ..ModelSpec::default()
    };
    cfg.epochs_stage1 = epochs1;
    cfg.epochs_stage2 = epochs2;
    cfg.batch_size = 4;
    cfg.eval_batch_size = 4;
    cfg
}

/// One case of `depth` 32x32 slices holding a bright disc of varying radius.
fn disc_case(id: &str, depth: usize, seed: u64) -> (Volume, MaskVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = Array3::from_shape_fn((depth, 32, 32), |(k, y, x)| {
        let r = 6.0 + 2.0 * k as f64;
        u8::from((y as f64 - 15.5).powi(2) + (x as f64 - 16.5).powi(2) <= r * r)
    });
    let vox = labels.mapv(|v| 200.0 + 500.0 * f32::from(v) + rng.random_range(-40.0..40.0));
    (
        Volume::new(vox, [1.0, 1.0, 3.0], id, DatasetId::Promise12).unwrap(),
        MaskVolume::new(labels, [1.0, 1.0, 3.0], id, DatasetId::Promise12).unwrap(),
    )
}

fn case_data(vol: &Volume, mask: &MaskVolume, cfg: &TrainConfig) -> CaseData {
    CaseData {
        case_id: vol.case_id.clone(),
        dataset: vol.dataset,
        samples: volume_to_samples(vol, mask, &cfg.preprocess).unwrap(),
        native_mask: mask.clone(),
    }
}

#[test]
fn ten_cases_split_by_floor_rule() {
    let dir = tempfile::tempdir().unwrap();
    generate_benchmark(dir.path(), 10, 3, (2, 16, 16)).unwrap();
    let opts = ManifestOptions {
        layout: Some(Layout::Promise12),
        ..Default::default()
    };
    let manifest = build_manifest(&dir.path().join("promise12"), DatasetId::Promise12, &opts).unwrap();
    for seed in [0, 1, 42, u64::MAX] {
        let s = make_split(&manifest, seed).unwrap();
        // test = floor(0.2 * 10) = 2, val = floor(0.2 * 8) = 1.
        assert_eq!((s.train_cases.len(), s.val_cases.len(), s.test_cases.len()), (7, 1, 2));
        let all: BTreeSet<_> = s.train_cases.iter().chain(&s.val_cases).chain(&s.test_cases).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s, make_split(&manifest, seed).unwrap());
    }
    assert_ne!(make_split(&manifest, 1).unwrap(), make_split(&manifest, 2).unwrap());

    let mut small = manifest.clone();
    small.cases.truncate(4);
    let err = make_split(&small, 0).unwrap_err().to_string();
    assert!(err.contains("too few cases"), "{err}");
}

#[test]
fn zero_epochs_return_initial_weights() {
    let cfg = tiny_cfg(32, 0, 0);
    let (v, m) = disc_case("c", 2, 1);
    let samples = volume_to_samples(&v, &m, &cfg.preprocess).unwrap();
    let out = train_model(&samples, &[], &cfg, "promise12", &mut |_| {}).unwrap();
    assert!(out.log.is_empty());
    assert!(out.step_losses.is_empty());
    assert_eq!(out.checkpoint.epoch, 0);
    let init = UNet::new(&cfg.model, cfg.seed).unwrap();
    assert_eq!(out.checkpoint.params, init.params());
}

#[test]
fn training_loss_sequence_is_reproducible() {
    let mut cfg = tiny_cfg(32, 2, 1);
    cfg.augment = AugmentPolicy::default();
    let (v, m) = disc_case("c", 6, 2);
    let samples = volume_to_samples(&v, &m, &cfg.preprocess).unwrap();
    let val = vec![samples[..2].to_vec()];
    let a = train_model(&samples, &val, &cfg, "promise12", &mut |_| {}).unwrap();
    let b = train_model(&samples, &val, &cfg, "promise12", &mut |_| {}).unwrap();
    assert_eq!(a.step_losses.len(), 3 * 2);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.step_losses), bits(&b.step_losses));
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log.len(), 3);
    assert_eq!(a.log.iter().map(|l| l.stage).collect::<Vec<_>>(), vec![1, 1, 2]);

    cfg.seed += 1;
    let c = train_model(&samples, &val, &cfg, "promise12", &mut |_| {}).unwrap();
    assert_ne!(bits(&a.step_losses), bits(&c.step_losses));
}

#[test]
fn memorised_case_scores_high() {
    let mut cfg = tiny_cfg(32, 120, 0);
    cfg.augment = AugmentPolicy::none();
    cfg.base_lr = 3e-3;
    let (v, m) = disc_case("only", 3, 3);
    let case = case_data(&v, &m, &cfg);
    let out = train_model(&case.samples, &[], &cfg, "promise12", &mut |_| {}).unwrap();
    let model = out.checkpoint.model().unwrap();
    let scores = evaluate_model(&model, std::slice::from_ref(&case), DscMode::Volume, 4).unwrap();
    assert_eq!(scores.len(), 1);
    assert!(scores[0].dsc >= 0.95, "dsc {}", scores[0].dsc);
}

#[test]
fn background_predictor_scores_zero() {
    let cfg = tiny_cfg(32, 0, 0);
    let mut model = UNet::new(&cfg.model, 0).unwrap();
    model.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let cases: Vec<CaseData> = (0..3)
        .map(|i| {
            let (v, m) = disc_case(&format!("c{i}"), 2, i);
            case_data(&v, &m, &cfg)
        })
        .collect();
    let scores = evaluate_model(&model, &cases, DscMode::Volume, 4).unwrap();
    assert!(scores.iter().all(|s| s.dsc == 0.0));
    assert_eq!(mean_dsc(&scores), 0.0);
    let slice_scores = evaluate_model(&model, &cases, DscMode::Slice, 4).unwrap();
    assert!(slice_scores.iter().all(|s| s.dsc == 0.0));

    let err = evaluate_model(&model, &[], DscMode::Volume, 4).unwrap_err().to_string();
    assert!(err.contains("empty test split"), "{err}");
}

fn prepare_run(dir: &Path) -> RunRoot {
    let data = dir.join("data");
    generate_benchmark(&data, 5, 11, (3, 32, 32)).unwrap();
    let root = RunRoot::new(dir.join("run"));
    let opts = ManifestOptions {
        layout: Some(Layout::Promise12),
        ..Default::default()
    };
    for d in DatasetId::TABLE_ORDER {
        ingest(&root, d, &data.join(d.as_str()), &opts).unwrap();
        split(&root, d, 5).unwrap();
    }
    root
}

#[test]
fn matrix_with_missing_runs_has_holes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = prepare_run(dir.path());
    let cfg = tiny_cfg(32, 1, 0);
    let single = train_source(&root, Source::Dataset(DatasetId::Promise12), &cfg, &mut |_| {}).unwrap();
    let combined = train_source(&root, Source::Combined, &cfg, &mut |_| {}).unwrap();
    assert!(root.checkpoint_path(Source::Combined).is_file());
    assert!(root.config_path(Source::Combined).is_file());
    assert!(root.log_path(Source::Combined).is_file());
    assert_eq!(TrainConfig::load(&root.config_path(Source::Combined)).unwrap(), cfg);
    // Each dataset keeps 3 of its 5 cases for training.
    assert!(combined.log[0].steps > single.log[0].steps);

    let m = build_matrix(&root).unwrap();
    assert!(!m.is_complete());
    let holes = m.holes();
    assert_eq!(holes.len(), 3 * 4);
    assert!(holes.iter().all(|(s, _)| !matches!(s, Source::Combined | Source::Dataset(DatasetId::Promise12))));
    assert_eq!(m.warnings.len(), 3);
    for d in DatasetId::TABLE_ORDER {
        for s in [Source::Combined, Source::Dataset(DatasetId::Promise12)] {
            let v = m.mean(s, d).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let csv = m.to_csv();
    assert!(csv.contains("NA"));
    assert_eq!(csv.lines().count(), 6);

    let again = build_matrix(&root).unwrap();
    assert_eq!(again.to_csv(), csv);
    assert_eq!(again.cases_csv(), m.cases_csv());
}

#[test]
fn splits_never_share_cases() {
    let dir = tempfile::tempdir().unwrap();
    let root = prepare_run(dir.path());
    for d in DatasetId::TABLE_ORDER {
        let s = root.load_split(d).unwrap();
        s.check_partition(&root.load_manifest(d).unwrap()).unwrap();
        let train: BTreeSet<_> = s.train_cases.iter().collect();
        assert!(s.val_cases.iter().chain(&s.test_cases).all(|c| !train.contains(c)));
        assert!(s.val_cases.iter().all(|c| !s.test_cases.contains(c)));
    }
}
