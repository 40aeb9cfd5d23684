//! End-to-end behaviour of the data pipeline, trainer and persistence.

use std::collections::HashMap;

use dfdnet::autodiff::Tape;
use dfdnet::data::io::{read_pfm, write_pfm};
use dfdnet::data::synth::SceneConfig;
use dfdnet::data::{augment, batch_order, Dataset, Split};
use dfdnet::model::{Head, Heads, Model};
use dfdnet::optim::OptimState;
use dfdnet::train::{train, train_step, TrainConfig};
use dfdnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn short_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        ..TrainConfig::micro()
    }
}

fn small_dataset() -> Dataset {
    Dataset::synthetic(&SceneConfig::default(), 3, 11).unwrap()
}

/// Hash of every tensor (parameters and buffers) whose name starts with `prefix`.
fn hashes(model: &Model<f32>, prefix: &str) -> HashMap<String, Vec<u8>> {
    model
        .state()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(name, t)| {
            let mut h = Sha256::new();
            t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
            (name.to_string(), h.finalize().to_vec())
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_runlogs() {
    let data = small_dataset();
    let mut cfg = short_config(3);
    cfg.augment = true;
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &data, None).unwrap();
    assert_eq!(a.log.deterministic_lines(), b.log.deterministic_lines());
    assert_eq!(
        a.model.state().collect::<Vec<_>>(),
        b.model.state().collect::<Vec<_>>()
    );

    cfg.seed += 1;
    let c = train(&cfg, &data, None).unwrap();
    assert_ne!(a.log.deterministic_lines(), c.log.deterministic_lines());
}

#[test]
fn runlog_records_decay_and_reloads() {
    let data = small_dataset();
    let cfg = TrainConfig {
        decay_epoch: Some(2),
        ..short_config(4)
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data, Some(dir.path())).unwrap();
    let lrs: Vec<f64> = out.log.epochs().map(|e| e.lr).collect();
    assert_eq!(lrs.len(), 4);
    assert_eq!(lrs[0], lrs[1]);
    assert!((lrs[2] * 10.0 - lrs[1]).abs() <= 1e-12 * lrs[1]);
    assert_eq!(lrs[2], lrs[3]);

    let reloaded = dfdnet::train::RunLog::load(dir.path().join("runlog.jsonl")).unwrap();
    assert_eq!(
        reloaded.deterministic_lines(),
        out.log.deterministic_lines()
    );
    assert_eq!(reloaded.config(), Some(&cfg));
    for step in out.log.steps() {
        let l = &step.loss;
        let parts = l.depth.unwrap_or(0.0) + cfg.weights.lambda * l.deblur.unwrap_or(0.0);
        assert!((parts - l.total).abs() <= 1e-6 * l.total.abs().max(1.0));
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let data = small_dataset();
    let out = train(&short_config(1), &data, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.2hde");
    out.model.save(&path).unwrap();
    let loaded = Model::<f32>::load(&path).unwrap();
    let image = data.split(Split::Train)[0].defocused.clone();
    assert_eq!(
        out.model.predict(&image).unwrap(),
        loaded.predict(&image).unwrap()
    );
    assert_eq!(out.model.normalization(), loaded.normalization());
}

#[test]
fn pfm_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pfm");
    let special = [0.0f32, -0.0, f32::MIN_POSITIVE, 1e-30, 3.5, 1e30, f32::MAX];
    let depth = Tensor::from_fn(vec![1, 1, 5, 7], |i| {
        special.get(i).copied().unwrap_or(0.7 + i as f32 * 0.3137)
    });
    write_pfm(&path, &depth).unwrap();
    let back = read_pfm(&path).unwrap();
    assert_eq!(back.shape(), depth.shape());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&depth));
}

fn isolated_step(heads: Heads, untouched: &str, touched: &str) {
    let data = small_dataset();
    let cfg = short_config(1);
    let mut model = Model::<f32>::build(&cfg.model, cfg.seed).unwrap();
    model.set_normalization(&data.manifest.normalization);
    let before_frozen = hashes(&model, untouched);
    let before_live = hashes(&model, touched);
    assert!(!before_frozen.is_empty() && !before_live.is_empty());

    let mut opt = OptimState::new(cfg.schedule()).unwrap();
    let mut tape = Tape::new();
    let batch = &data.epoch_batches(Split::Train, 3, 0, 0, false).unwrap()[0];
    for epoch in 0..2 {
        train_step(&mut model, &mut opt, &mut tape, batch, heads, &cfg, epoch).unwrap();
    }
    assert_eq!(hashes(&model, untouched), before_frozen);
    assert_ne!(hashes(&model, touched), before_live);
}

#[test]
fn depth_only_steps_leave_deblur_head_untouched() {
    isolated_step(
        Heads {
            depth: true,
            aif: false,
        },
        "aif.",
        "depth.",
    );
}

#[test]
fn deblur_only_steps_leave_depth_head_untouched() {
    isolated_step(
        Heads {
            depth: false,
            aif: true,
        },
        "depth.",
        "aif.",
    );
}

#[test]
fn ablated_model_still_serves_remaining_head() {
    let data = small_dataset();
    let cfg = TrainConfig {
        ablation: dfdnet::train::AblationMode::DepthOnly,
        ..short_config(1)
    };
    let out = train(&cfg, &data, None).unwrap();
    assert!(!out.model.heads().aif);
    let (depth, aif) = out
        .model
        .predict(&data.split(Split::Train)[0].defocused)
        .unwrap();
    assert_eq!(depth.unwrap().shape(), &[1, 1, 64, 64]);
    assert!(aif.is_none());
    assert!(out.final_report.depth.is_some() && out.final_report.image.is_none());
    assert!(
        Model::<f32>::build(&cfg.model, 0)
            .unwrap()
            .without_head(Head::Aif)
            .unwrap()
            .heads()
            .depth
    );
}

#[test]
fn flip_frequency_is_one_half() {
    let sample = small_dataset().split(Split::Train)[0].clone();
    let flipped_image = sample.flip_horizontal().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 10_000;
    let flips = (0..draws)
        .filter(|_| augment(&sample, &mut rng).unwrap().aif == flipped_image.aif)
        .count();
    let rate = flips as f64 / draws as f64;
    assert!((rate - 0.5).abs() <= 0.02, "flip rate {rate}");
}

#[test]
fn flips_keep_depth_and_images_aligned() {
    let sample = small_dataset().split(Split::Train)[0].clone();
    let f = sample.flip_horizontal().unwrap();
    assert_eq!(f.aif, sample.aif.flip_horizontal().unwrap());
    assert_eq!(f.depth, sample.depth.flip_horizontal().unwrap());
    assert_eq!(f.defocused, sample.defocused.flip_horizontal().unwrap());
    assert_eq!(f.flip_horizontal().unwrap().aif, sample.aif);
}

#[test]
fn batch_order_covers_every_index_once() {
    for (n, bs) in [(1, 1), (7, 3), (8, 8), (10, 4), (5, 9)] {
        for epoch in 0..3 {
            let order = batch_order(n, bs, 42, epoch).unwrap();
            let mut seen: Vec<usize> = order.iter().flatten().copied().collect();
            assert!(order.iter().all(|b| !b.is_empty() && b.len() <= bs));
            assert_eq!(order.len(), n.div_ceil(bs));
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert_eq!(order, batch_order(n, bs, 42, epoch).unwrap());
        }
    }
    let a = batch_order(32, 4, 1, 0).unwrap();
    assert_ne!(a, batch_order(32, 4, 1, 1).unwrap());
    assert_ne!(a, batch_order(32, 4, 2, 0).unwrap());
    assert!(batch_order(3, 0, 0, 0).is_err());
}

#[test]
fn synthetic_dataset_is_reproducible() {
    let a = small_dataset();
    let b = small_dataset();
    for (x, y) in a.split(Split::Train).iter().zip(b.split(Split::Train)) {
        assert_eq!(x, &y);
    }
    assert_eq!(a.manifest.normalization, b.manifest.normalization);
}
