//! Evaluates every loss variant on a perfect prediction and on a noisy one
//! and prints each term of the breakdown.

use dfdnet::autodiff::Tape;
use dfdnet::loss::{objective, LossVariant, LossWeights, SsimConfig};
use dfdnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dfdnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let depth = Tensor::<f64>::from_fn(vec![1, 1, 16, 16], |i| 1.0 + (i % 16) as f64 * 0.25);
    let aif = Tensor::<f64>::from_fn(vec![1, 3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let noisy_depth = depth.map(|d| d + 0.1);
    let noisy_aif = Tensor::from_fn(vec![1, 3, 16, 16], |i| {
        (aif.data()[i] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
    });
    let (w, ssim) = (LossWeights::default(), SsimConfig::default());

    for (label, dp, ap) in [
        ("perfect", &depth, &aif),
        ("noisy", &noisy_depth, &noisy_aif),
    ] {
        println!("{label} prediction");
        for variant in LossVariant::ALL {
            let mut tape = Tape::new();
            let vars = [dp, &depth, ap, &aif].map(|t| tape.constant(t.clone()));
            let (_, b) = objective(
                &mut tape,
                variant,
                &w,
                &ssim,
                Some((vars[0], vars[1])),
                Some((vars[2], vars[3])),
            )?;
            println!(
                "  {:<18} {:<55} total {:.6e}",
                variant.name(),
                variant.formula(),
                b.total
            );
            println!("      {b:?}");
        }
    }
    Ok(())
}
