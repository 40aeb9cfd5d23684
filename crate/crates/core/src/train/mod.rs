//! Training loop, run logs, head ablation, the loss-variant grid and
//! inference.

mod compare;
mod infer;
mod runlog;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use compare::{
    ablation_suite, loss_grid, AblationReport, GridReport, RunSummary, ABLATION_COLUMNS,
    GRID_COLUMNS,
};
pub use infer::{infer, InferOutput};
pub use runlog::{EpochRecord, EvalRecord, LogRecord, RunLog, StepRecord};

use crate::autodiff::Tape;
use crate::data::{Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{objective, LossBreakdown, LossVariant, LossWeights, SsimConfig};
use crate::metrics::{evaluate_split, MetricConfig, MetricReport};
use crate::model::{Head, Heads, Mode, Model, ModelConfig};
use crate::optim::{OptimState, SgdConfig};

/// Which heads are trained (and, for single-head modes, which one is
/// removed from the network).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Both,
    DepthOnly,
    DeblurOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [
        AblationMode::Both,
        AblationMode::DepthOnly,
        AblationMode::DeblurOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Both => "both",
            AblationMode::DepthOnly => "depth_only",
            AblationMode::DeblurOnly => "deblur_only",
        }
    }

    pub fn heads(self) -> Heads {
        match self {
            AblationMode::Both => Heads::BOTH,
            AblationMode::DepthOnly => Heads {
                depth: true,
                aif: false,
            },
            AblationMode::DeblurOnly => Heads {
                depth: false,
                aif: true,
            },
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation mode `{s}` (both|depth_only|deblur_only)"
                ))
            })
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Epoch at which the learning rate decays. `None` means the optimizer's
    /// own setting for a 500-epoch run and `decay_fraction * epochs`
    /// otherwise.
    pub decay_epoch: Option<usize>,
    pub decay_fraction: f64,
    pub variant: LossVariant,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub model: ModelConfig,
    pub ablation: AblationMode,
    pub seed: u64,
    /// Evaluate and checkpoint every this many epochs (0: only at the end).
    pub eval_every: usize,
    /// Random horizontal flips.
    pub augment: bool,
    /// Initialise the depth prediction bias to the mean training depth.
    pub depth_bias_init: bool,
    pub metrics: MetricConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 4,
            optimizer: SgdConfig::default(),
            decay_epoch: None,
            decay_fraction: 0.6,
            variant: LossVariant::default(),
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            model: ModelConfig::default(),
            ablation: AblationMode::Both,
            seed: 0,
            eval_every: 0,
            augment: true,
            depth_bias_init: true,
            metrics: MetricConfig::default(),
        }
    }
}

pub const REFERENCE_EPOCHS: usize = 500;

impl TrainConfig {
    /// Desk-scale overfitting preset: the tiny network takes full-batch
    /// steps over eight scenes without flips. The step size is far above
    /// the full-scale default, which barely moves a freshly initialised
    /// tiny network within 500 steps.
    pub fn micro() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            optimizer: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.95,
                ..SgdConfig::default()
            },
            model: ModelConfig::tiny(),
            augment: false,
            seed: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
            return Err(Error::Config("decay_fraction must lie in (0, 1]".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.model.validate()?;
        self.metrics.validate()
    }

    /// Optimizer settings with the decay epoch resolved.
    pub fn schedule(&self) -> SgdConfig {
        let decay_epoch = self
            .decay_epoch
            .unwrap_or(if self.epochs == REFERENCE_EPOCHS {
                self.optimizer.decay_epoch
            } else {
                (self.decay_fraction * self.epochs as f64).round() as usize
            });
        SgdConfig {
            decay_epoch,
            ..self.optimizer.clone()
        }
    }

    /// Short content hash identifying the configuration.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Loss of one batch for the heads in `heads`; only those decoders run.
pub fn batch_loss(
    model: &mut Model<f32>,
    tape: &mut Tape<f32>,
    batch: &Batch,
    heads: Heads,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(
    crate::autodiff::Var,
    Vec<crate::autodiff::Var>,
    LossBreakdown,
)> {
    tape.reset();
    let vars = model.bind(tape, mode == Mode::Train);
    let input = tape.constant(batch.input.clone());
    let features = model.encode(tape, &vars, input, mode)?;
    let depth = if heads.depth {
        let pred = model.decode_depth(tape, &vars, &features, mode)?;
        Some((pred, tape.constant(batch.depth.clone())))
    } else {
        None
    };
    let aif = if heads.aif {
        let defocused = tape.constant(batch.defocused.clone());
        let pred = model.decode_aif(tape, &vars, &features, defocused, mode)?;
        Some((pred, tape.constant(batch.aif.clone())))
    } else {
        None
    };
    let (loss, breakdown) = objective(tape, cfg.variant, &cfg.weights, &cfg.ssim, depth, aif)?;
    Ok((loss, vars, breakdown))
}

/// One optimisation step on `batch` using the loss terms of `heads`.
/// Parameters outside the active heads receive no gradient and therefore
/// stay untouched.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut OptimState<f32>,
    tape: &mut Tape<f32>,
    batch: &Batch,
    heads: Heads,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossBreakdown> {
    let (loss, vars, breakdown) = batch_loss(model, tape, batch, heads, cfg, Mode::Train)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!(
            "loss became non-finite at epoch {epoch}: {breakdown:?}"
        )));
    }
    tape.backward(loss)?;
    model.zero_grad();
    model.accumulate_grads(tape, &vars)?;
    opt.step(model.params_mut().tensors_mut(), epoch)?;
    Ok(breakdown)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: RunLog,
    pub final_report: MetricReport,
    /// Path of the final checkpoint when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Builds the model for `cfg` (both heads drawn from the seed, then the
/// ablated head removed) and trains it on the training split.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let eval_split = if dataset.split(Split::Test).is_empty() {
        Split::Train
    } else {
        Split::Test
    };
    // Train-mode batch norm at the bottleneck needs two values per channel
    // in every batch, including a short final one.
    let smallest = match train_set.len() % cfg.batch_size {
        0 => cfg.batch_size.min(train_set.len()),
        r => r,
    };
    let bottleneck = (train_set[0].height() >> 5) * (train_set[0].width() >> 5);
    if smallest * bottleneck < 2 {
        return Err(Error::Config(format!(
            "a batch of {smallest} leaves one value per channel at the {}x{} bottleneck; \
             change batch_size or use larger images",
            train_set[0].height() >> 5,
            train_set[0].width() >> 5
        )));
    }
    let heads = cfg.ablation.heads();
    let mut model = Model::<f32>::build(&cfg.model, cfg.seed)?;
    if !heads.aif {
        model = model.without_head(Head::Aif)?;
    }
    if !heads.depth {
        model = model.without_head(Head::Depth)?;
    }
    model.set_normalization(&dataset.manifest.normalization);
    if heads.depth && cfg.depth_bias_init {
        let n: usize = train_set.iter().map(|s| s.depth.len()).sum();
        let sum: f64 = train_set
            .iter()
            .flat_map(|s| s.depth.data())
            .map(|&d| d as f64)
            .sum();
        model.set_prediction_bias(Head::Depth, (sum / n as f64) as f32)?;
    }
    let schedule = cfg.schedule();
    let mut opt = OptimState::new(schedule.clone())?;
    let mut tape = Tape::new();
    let mut log = RunLog::new(cfg);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches =
            dataset.epoch_batches(Split::Train, cfg.batch_size, cfg.seed, epoch, cfg.augment)?;
        let lr = schedule.lr_at(epoch);
        let mut records = Vec::with_capacity(batches.len());
        for batch in &batches {
            let loss = train_step(&mut model, &mut opt, &mut tape, batch, heads, cfg, epoch)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                batch: batch.len(),
                loss,
            };
            log.push(LogRecord::Step(rec.clone()));
            records.push(rec);
            step += 1;
        }
        let epoch_rec = EpochRecord::average(epoch, lr, &records);
        log::info!(
            "epoch {epoch}: loss {:.6} (lr {lr:e})",
            epoch_rec.mean.total
        );
        log.push(LogRecord::Epoch(epoch_rec));
        let last = epoch + 1 == cfg.epochs;
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !last {
            let (report, _) = evaluate_split(&model, dataset, eval_split, &cfg.metrics)?;
            log.push(LogRecord::Eval(EvalRecord {
                epoch,
                split: eval_split,
                report,
            }));
            if let Some(dir) = out_dir {
                model.save(dir.join(format!("checkpoint_epoch{:04}.2hde", epoch + 1)))?;
            }
        }
    }

    let (final_report, _) = evaluate_split(&model, dataset, eval_split, &cfg.metrics)?;
    log.push(LogRecord::Eval(EvalRecord {
        epoch: cfg.epochs - 1,
        split: eval_split,
        report: final_report.clone(),
    }));
    log.finish(started.elapsed().as_secs_f64());
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("checkpoint.2hde");
            model.save(&path)?;
            log.save(dir.join("runlog.jsonl"))?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        log,
        final_report,
        checkpoint,
    })
}
