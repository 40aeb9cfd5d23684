//! End to end on disk: writes a synthetic dataset with a manifest, loads it
//! back, trains briefly, evaluates the test split, saves a checkpoint and
//! runs inference on a held-out defocused image.
//!
//! `cargo run --release --example synth_train_infer -- [work_dir]` (defaults
//! to a directory under the system temp dir)

use std::path::PathBuf;

use dfdnet::data::{write_dataset, Dataset, DatasetManifest, Split, SynthConfig};
use dfdnet::metrics::{evaluate_split, MetricConfig, MetricReport};
use dfdnet::model::Model;
use dfdnet::train::{infer, train, TrainConfig};

fn main() -> dfdnet::Result<()> {
    let work: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dfdnet_synth_train_infer"));
    let synth = SynthConfig {
        count: 10,
        test_count: 2,
        seed: 21,
        ..SynthConfig::default()
    };
    let (manifest_path, _) = write_dataset(&work.join("data"), &synth)?;
    println!("dataset manifest {}", manifest_path.display());

    let manifest = DatasetManifest::load(&manifest_path)?;
    let dataset = Dataset::load(manifest, None, &Default::default())?;
    let mut cfg = TrainConfig::micro();
    cfg.epochs = 30;
    cfg.eval_every = 10;
    let outcome = train(&cfg, &dataset, Some(&work.join("run")))?;
    let checkpoint = outcome.checkpoint.expect("output directory given");

    let model = Model::<f32>::load(&checkpoint)?;
    let (report, _) = evaluate_split(&model, &dataset, Split::Test, &MetricConfig::default())?;
    println!("{}\n{}", MetricReport::csv_header(), report.csv_row("test"));

    let held_out = dataset
        .manifest
        .split(Split::Test)
        .next()
        .expect("test split");
    let image = dataset
        .manifest
        .resolve(held_out.defocused.as_ref().expect("defocused on disk"));
    for o in infer(&model, &[image], &work.join("infer"))? {
        println!(
            "{} -> {:?} {:?}",
            o.input.display(),
            o.depth_pfm,
            o.deblurred_png
        );
    }
    Ok(())
}
