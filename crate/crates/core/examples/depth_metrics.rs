//! Depth and image-quality metrics on hand-made cases: a 30% over-estimate,
//! a uniform 16/255 image error and a random depth pair.

use dfdnet::metrics::{depth_metrics, psnr, ssim_metric, MetricConfig};
use dfdnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dfdnet::Result<()> {
    let cfg = MetricConfig::default();
    let gt = Tensor::<f32>::from_fn(vec![1, 1, 8, 8], |i| 1.0 + i as f32 * 0.1);
    let over = gt.map(|d| 1.3 * d);
    println!("pred = 1.3 * gt: {:?}", depth_metrics(&over, &gt, &cfg)?);

    let img = Tensor::<f32>::full(vec![1, 3, 16, 16], 0.5);
    let shifted = img.map(|v| v + 16.0 / 255.0);
    println!(
        "uniform 16/255 error: PSNR {:.4} dB",
        psnr(&shifted, &img, 1.0, cfg.psnr_cap_db)?.db
    );
    println!(
        "identical images: {:?}",
        psnr(&img, &img, 1.0, cfg.psnr_cap_db)?
    );

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Tensor::<f32>::from_fn(vec![1, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let b = Tensor::<f32>::from_fn(vec![1, 3, 16, 16], |i| {
        (a.data()[i] + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
    });
    println!(
        "SSIM of a lightly perturbed image {:.4}",
        ssim_metric(&b, &a, &cfg.ssim)?
    );

    let pred = Tensor::<f32>::from_fn(vec![1, 1, 8, 8], |_| rng.gen_range(0.7..10.0));
    let m = depth_metrics(&pred, &gt, &cfg)?;
    println!("random depth: {m:?}");
    assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
    Ok(())
}
