//! Overfits eight synthetic 64x64 scenes with the desk-scale network and the
//! full hybrid loss, then reports the loss drop and training-set metrics.
//!
//! Run with `cargo run --release --example micro_overfit`. `EPOCHS`, `LR`,
//! `MOMENTUM`, `BATCH` and `COC` (pixels per meter of blur) override the
//! preset.

use std::time::Instant;

use dfdnet::data::{Dataset, SceneConfig};
use dfdnet::metrics::psnr;
use dfdnet::train::{train, TrainConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> dfdnet::Result<()> {
    env_logger::init();
    let mut scene = SceneConfig::default();
    scene.camera.coc_to_pixel = env("COC", scene.camera.coc_to_pixel);
    let dataset = Dataset::synthetic(&scene, 8, 7)?;
    let samples = dataset.split(dfdnet::data::Split::Train);
    let mut identity = 0.0;
    for s in &samples {
        identity += psnr(&s.defocused, &s.aif, 1.0, 100.0)?.db / samples.len() as f64;
    }
    println!("identity baseline (defocused vs all-in-focus) PSNR {identity:.2} dB");

    let mut cfg = TrainConfig::micro();
    cfg.epochs = env("EPOCHS", cfg.epochs);
    cfg.batch_size = env("BATCH", cfg.batch_size);
    cfg.optimizer.learning_rate = env("LR", cfg.optimizer.learning_rate);
    cfg.optimizer.momentum = env("MOMENTUM", cfg.optimizer.momentum);

    let start = Instant::now();
    let out = train(&cfg, &dataset, None)?;
    let epochs: Vec<_> = out.log.epochs().collect();
    let (first, last) = (epochs[0].mean.total, epochs[epochs.len() - 1].mean.total);
    for e in epochs.iter().step_by((epochs.len() / 10).max(1)) {
        println!(
            "epoch {:4}  loss {:.5}  lr {:e}",
            e.epoch, e.mean.total, e.lr
        );
    }
    println!(
        "loss: first epoch {first:.5}, last epoch {last:.5}, drop {:.1}%",
        100.0 * (1.0 - last / first)
    );
    let d = out.final_report.depth.expect("depth head");
    let i = out.final_report.image.expect("deblur head");
    println!(
        "train depth RMSE {:.4} m, abs-rel {:.4}, delta1 {:.3}",
        d.rmse, d.abs_rel, d.delta1
    );
    println!("train deblur PSNR {:.2} dB, SSIM {:.4}", i.psnr_db, i.ssim);
    println!(
        "steps {}, wall clock {:.1} s",
        out.log.steps().count(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
