//! Command-line front end: dataset synthesis, training, evaluation, head
//! ablation, the loss grid, the gradient self-check and inference.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numerical failure (including a failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dfdnet::autodiff::OpKind;
use dfdnet::config::{parse_size, RunConfig};
use dfdnet::data::{Dataset, DatasetManifest, SceneConfig, Split, SynthConfig};
use dfdnet::gradcheck::{run_matching, run_suite, GradcheckConfig};
use dfdnet::metrics::{evaluate_split, MetricConfig, MetricReport};
use dfdnet::model::Model;
use dfdnet::train::{ablation_suite, infer, loss_grid, train};
use dfdnet::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "dfdnet",
    version,
    about = "Two-headed depth-from-defocus and deblurring network"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset of textured fronto-parallel planes.
    Synth(SynthArgs),
    /// Train one configuration.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train with both heads, depth only and deblurring only; compare.
    Ablate(RunArgs),
    /// Train every loss variant and tabulate the results.
    Grid(RunArgs),
    /// Check every backward rule and loss against finite differences.
    Gradcheck(GradcheckArgs),
    /// Predict depth and the deblurred image for image files.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// How many of the scenes (the last ones) form the test split.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    /// Image size, `N` or `HxW`.
    #[arg(long, default_value = "64")]
    size: String,
    /// Depth range in meters, `MIN,MAX`.
    #[arg(long, default_value = "0.7,10")]
    depth_range: String,
    /// Focus distance of the simulated camera in meters.
    #[arg(long)]
    focus_distance: Option<f64>,
    /// Pixels per meter of circle-of-confusion diameter.
    #[arg(long)]
    coc_to_pixel: Option<f64>,
    /// Seed for textures and depth layouts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write an 8-bit circle-of-confusion map per scene.
    #[arg(long)]
    write_coc: bool,
    /// Output directory; files are overwritten.
    #[arg(long)]
    out: PathBuf,
}

/// Configuration sources shared by the training subcommands.
#[derive(Args, Debug)]
struct RunArgs {
    /// INI-style `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest written by `synth`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for checkpoints, logs and tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Passes over the training split.
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per optimisation step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial SGD step size.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Seed for initialisation, batch order and flips.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss variant name, e.g. `l1grad+charb_ssim`.
    #[arg(long)]
    variant: Option<String>,
    /// both | depth_only | deblur_only
    #[arg(long)]
    ablation: Option<String>,
    /// Any config key, `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model checkpoint (`.2hde`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest written by `synth`.
    #[arg(long)]
    manifest: PathBuf,
    /// train | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Resize samples on load, `N` or `HxW`.
    #[arg(long)]
    image_size: Option<String>,
    /// Directory for `eval.csv`, `eval_samples.csv` and `eval.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per case.
    #[arg(long, default_value_t = 5)]
    instances: usize,
    /// Seed for the random instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Run only the cases whose name starts with this prefix.
    #[arg(long, value_name = "PREFIX")]
    only: Option<String>,
    /// Corrupt one backward rule (test hook).
    #[arg(long, hide = true)]
    inject_bug: Option<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Model checkpoint (`.2hde`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the depth maps and deblurred images.
    #[arg(long)]
    out: PathBuf,
    /// Defocused RGB PNG files.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

impl RunArgs {
    fn flags(&self) -> Result<Vec<(String, String)>> {
        let mut flags = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.push((k.to_string(), v));
            }
        };
        push(
            "manifest",
            self.manifest.as_ref().map(|p| p.display().to_string()),
        );
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("learning_rate", self.learning_rate.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("variant", self.variant.clone());
        push("ablation", self.ablation.clone());
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            flags.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(flags)
    }

    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::layered(self.config.as_deref(), std::env::vars(), &self.flags()?)
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.manifest.as_ref().ok_or_else(|| {
        Error::Config("no manifest given (--manifest or `manifest = ...`)".into())
    })?;
    Dataset::load(DatasetManifest::load(path)?, cfg.image_size, &cfg.defocus)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let (height, width) = parse_size("size", &a.size)?;
    let (lo, hi) = a.depth_range.split_once(',').ok_or_else(|| {
        Error::Config(format!(
            "--depth-range expects MIN,MAX, got `{}`",
            a.depth_range
        ))
    })?;
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad depth `{s}`")))
    };
    let mut scene = SceneConfig {
        height,
        width,
        depth_range: (parse(lo)?, parse(hi)?),
        ..SceneConfig::default()
    };
    if let Some(s) = a.focus_distance {
        scene.camera.focus_distance_m = s;
    }
    if let Some(c) = a.coc_to_pixel {
        scene.camera.coc_to_pixel = c;
    }
    let cfg = SynthConfig {
        scene,
        count: a.count,
        test_count: a.test_count,
        seed: a.seed,
        write_coc: a.write_coc,
    };
    let (path, manifest) = dfdnet::data::write_dataset(&a.out, &cfg)?;
    println!(
        "wrote {} scenes, manifest {}",
        manifest.entries.len(),
        path.display()
    );
    Ok(())
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let dataset = load_dataset(&cfg)?;
    if let Some(out) = &cfg.out {
        cfg.echo_into(out)?;
    }
    let outcome = train(&cfg.train, &dataset, cfg.out.as_deref())?;
    println!("{}", MetricReport::csv_header());
    println!(
        "{}",
        outcome.final_report.csv_row(cfg.train.ablation.name())
    );
    if let Some(ckpt) = outcome.checkpoint {
        println!("checkpoint {}", ckpt.display());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let model = Model::<f32>::load(&a.checkpoint)?;
    let size = a
        .image_size
        .as_deref()
        .map(|s| parse_size("image_size", s))
        .transpose()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let dataset = Dataset::load(manifest, size, &Default::default())?;
    let (report, samples) = evaluate_split(&model, &dataset, split, &MetricConfig::default())?;
    let label = a.split.as_str();
    let csv = format!(
        "{}\n{}\n",
        MetricReport::csv_header(),
        report.csv_row(label)
    );
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut per_sample = MetricReport::csv_header() + "\n";
        for s in &samples {
            per_sample.push_str(&s.csv_row());
            per_sample.push('\n');
        }
        let echo = format!(
            "# checkpoint = {}\n# manifest = {}\n# split = {label}\n",
            a.checkpoint.display(),
            a.manifest.display()
        );
        write_file(&out.join("eval.csv"), &(echo.clone() + &csv))?;
        write_file(&out.join("eval_samples.csv"), &(echo + &per_sample))?;
        write_file(&out.join("eval.json"), &report.to_json())?;
    }
    Ok(())
}

fn cmd_ablate(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let dataset = load_dataset(&cfg)?;
    if let Some(out) = &cfg.out {
        cfg.echo_into(out)?;
    }
    let report = ablation_suite(&cfg.train, &dataset, cfg.out.as_deref())?;
    print!("{}", report.to_csv()?);
    Ok(())
}

fn cmd_grid(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let dataset = load_dataset(&cfg)?;
    if let Some(out) = &cfg.out {
        cfg.echo_into(out)?;
    }
    let report = loss_grid(&cfg.train, &dataset, cfg.out.as_deref())?;
    print!("{}", report.to_csv()?);
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let fault = a
        .inject_bug
        .as_deref()
        .map(str::parse::<OpKind>)
        .transpose()?;
    let cfg = GradcheckConfig {
        instances: a.instances,
        seed: a.seed,
        tolerance: a.tolerance,
        fault,
        ..GradcheckConfig::default()
    };
    let report = match &a.only {
        Some(prefix) => run_matching(&cfg, prefix)?,
        None => run_suite(&cfg)?,
    };
    if report.results.is_empty() {
        return Err(Error::Config(
            "no gradient check case matches --only".into(),
        ));
    }
    print!("{}", report.to_text());
    if report.all_passed() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed (max error {:.3e})",
            report.max_error()
        )))
    }
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let model = Model::<f32>::load(&a.checkpoint)?;
    for o in infer(&model, &a.images, &a.out)? {
        let written: Vec<String> = [&o.depth_pfm, &o.depth_png, &o.deblurred_png]
            .into_iter()
            .flatten()
            .map(|p| p.display().to_string())
            .collect();
        println!("{} -> {}", o.input.display(), written.join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Infer(a) => cmd_infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
