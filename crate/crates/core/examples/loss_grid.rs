//! Trains one short run per loss variant from the same seed and prints the
//! variant table. `EPOCHS` overrides the run length.

use dfdnet::data::{Dataset, SceneConfig};
use dfdnet::train::{loss_grid, TrainConfig};

fn main() -> dfdnet::Result<()> {
    let dataset = Dataset::synthetic(&SceneConfig::default(), 8, 7)?;
    let mut cfg = TrainConfig::micro();
    cfg.epochs = std::env::var("EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(40);
    let report = loss_grid(&cfg, &dataset, None)?;
    print!("{}", report.to_csv()?);
    Ok(())
}
