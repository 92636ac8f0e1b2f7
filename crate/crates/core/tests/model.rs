mod common;

use candle_core::Tensor;
use proptest::prelude::*;

use mmreid::ctx::ForwardCtx;
use mmreid::data::{self, Split};
use mmreid::model::{train_step, triplet_loss, Adam, Batch, ModuleToggles, Next, NextConfig};
use mmreid::nn::{self, tensor};
use mmreid::train::{train, TrainConfig, TrainPaths};

fn batch(cfg: &NextConfig, n: usize) -> (data::DatasetIndex, Batch) {
    let idx = data::generate_synthetic(3, 2, cfg.encoder.image_size, 1).unwrap();
    let samples: Vec<_> = idx.indices(Split::Train).into_iter().take(n).map(|i| idx.sample(i, None).unwrap()).collect();
    let b = Batch::from_samples(&samples, &cfg.encoder).unwrap();
    (idx, b)
}

#[test]
fn embedding_shapes_follow_toggles() {
    let cfgs = [
        (ModuleToggles { mmfa: false, tmse: false, csse: false }, 192),
        (ModuleToggles { mmfa: true, tmse: false, csse: false }, 192),
        (ModuleToggles { mmfa: true, tmse: true, csse: false }, 576),
        (ModuleToggles::default(), 768),
    ];
    for (modules, dim) in cfgs {
        let cfg = NextConfig { modules, ..NextConfig::default() };
        assert_eq!(cfg.embedding_dim(), dim);
        let model = Next::new(&cfg, 3).unwrap();
        let (_, b) = batch(&cfg, 2);
        let out = model.forward(&b, &ForwardCtx::train(0, 0)).unwrap();
        assert_eq!(out.embedding.dims(), [2, dim]);
        assert_eq!(out.logits.dims(), [2, 3]);
    }
    let bad = NextConfig {
        modules: ModuleToggles { mmfa: false, tmse: true, csse: false },
        ..NextConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn eval_embedding_is_bit_identical() {
    let cfg = NextConfig::default();
    let model = Next::new(&cfg, 3).unwrap();
    let (_, b) = batch(&cfg, 4);
    let a = model.embed(&b).unwrap();
    let c = model.embed(&b).unwrap();
    assert_eq!(a, c);
    assert!(a.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn visual_gradients_are_nonzero() {
    let probes = common::gradient_check(&NextConfig::default(), &["visual.patch_embed.weight"], 1e-5);
    assert!(probes[0].analytic.abs() > 0.0);
}

#[test]
fn training_step_freezes_text_and_moves_visual() {
    let cfg = NextConfig::default();
    let model = Next::new(&cfg, 3).unwrap();
    let (_, b) = batch(&cfg, 6);
    let snapshot = |name: &str| nn::to_vec1(&model.store.get(name).unwrap().as_tensor().flatten_all().unwrap()).unwrap();
    let text_names: Vec<String> = model.store.names().into_iter().filter(|n| n.starts_with("text.")).collect();
    let before: Vec<_> = text_names.iter().map(|n| snapshot(n)).collect();
    let vis = snapshot("visual.patch_embed.weight");
    let mut opt = Adam::new(cfg.optimizer.clone());
    let (report, _) = train_step(&model, &b, &mut opt, &ForwardCtx::train(0, 0), cfg.optimizer.lr).unwrap();
    assert_eq!(report.total, report.id_loss + report.triplet_loss);
    for (n, v) in text_names.iter().zip(&before) {
        assert_eq!(&snapshot(n), v, "{n}");
    }
    assert_ne!(snapshot("visual.patch_embed.weight"), vis);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let idx = data::generate_synthetic(3, 2, (32, 16), 2).unwrap();
    let cfg = TrainConfig {
        steps: 3,
        p: 2,
        k: 2,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let outcome = train(&idx, &cfg, Some(dir.path())).unwrap();
    let paths = TrainPaths::new(dir.path());
    let loaded = Next::load(&paths.last).unwrap();
    assert_eq!(loaded.cfg, outcome.model.cfg);
    let (_, b) = batch(&cfg.model, 4);
    assert_eq!(loaded.embed(&b).unwrap(), outcome.model.embed(&b).unwrap());
    assert!(paths.log.is_file() && paths.best.is_file());

    std::fs::write(dir.path().join("junk.safetensors"), b"nope").unwrap();
    assert!(Next::load(&dir.path().join("junk.safetensors")).is_err());
}

fn emb_tensor(rows: &[Vec<f64>]) -> Tensor {
    tensor(rows.concat(), &[rows.len(), rows[0].len()]).unwrap()
}

proptest! {
    #[test]
    fn triplet_loss_is_nonnegative_and_scale_sensitive(
        rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 4..8),
    ) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| i % 2).collect();
        let l = triplet_loss(&emb_tensor(&rows), &labels, 0.3).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
        let same: Vec<Vec<f64>> = rows.iter().map(|_| rows[0].clone()).collect();
        let l0 = triplet_loss(&emb_tensor(&same), &labels, 0.3).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((l0 - 0.3).abs() <= 1e-12);
    }
}
