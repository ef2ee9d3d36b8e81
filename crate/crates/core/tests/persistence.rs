use proptest::prelude::*;

use gssl_core::config::{ExperimentConfig, InitKind, Split, ViewKind};
use gssl_core::datagen::generate_domain;
use gssl_core::nnet::ModelParams;
use gssl_core::store;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trip_is_a_fixed_point(
        seed in any::<u64>(),
        p_mask in 0.0f64..=1.0,
        temperature in 0.05f64..2.0,
        steps in 0usize..5000,
        candr in any::<bool>(),
        narrow in any::<bool>(),
        ensemble in 1usize..6,
    ) {
        let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        cfg.uncertainty.p_mask = p_mask;
        cfg.uncertainty.temperature = temperature;
        cfg.uncertainty.steps = steps;
        cfg.uncertainty.view = if candr { ViewKind::Candr } else { ViewKind::Mask };
        cfg.uncertainty.init = if narrow { InitKind::Narrow } else { InitKind::General };
        cfg.baselines.ensemble_size = ensemble;
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }
}

#[test]
fn datasets_and_checkpoints_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.data.height = 16;
    cfg.data.width = 16;
    cfg.model.patch_size = 4;
    let samples = generate_domain(&cfg.domain_spec("near", Split::Test).unwrap(), 3).unwrap();
    let ds = dir.path().join("near");
    store::write_dataset(&ds, "near", cfg.data.num_classes, &samples, false).unwrap();
    let (manifest, back) = store::read_dataset(&ds).unwrap();
    assert_eq!(manifest.files.len(), 3);
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.ood_mask, b.ood_mask);
        for (x, y) in a.image.data.iter().zip(&b.image.data) {
            assert_eq!(*x as f32, *y as f32);
        }
    }

    let params = ModelParams::init(cfg.model_config().unwrap(), 4).unwrap();
    let path = dir.path().join("m.gssl");
    store::save_model(&path, &params).unwrap();
    let loaded = store::load_model(&path).unwrap();
    assert_eq!(loaded.config, params.config);
    let bytes = std::fs::read(&path).unwrap();
    store::save_model(&path, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}
