//! Append-only, line-delimited JSON record of a training run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::metrics::MetricReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub batch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Unweighted mean of the step losses of the epoch.
    pub mean: LossBreakdown,
}

impl EpochRecord {
    pub fn average(epoch: usize, lr: f64, steps: &[StepRecord]) -> Self {
        let n = steps.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = steps.iter().filter_map(|s| f(&s.loss)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / n)
        };
        Self {
            epoch,
            lr,
            steps: steps.len(),
            mean: LossBreakdown {
                total: steps.iter().map(|s| s.loss.total).sum::<f64>() / n,
                depth: avg(|l| l.depth),
                l1_depth: avg(|l| l.l1_depth),
                grad_smooth: avg(|l| l.grad_smooth),
                deblur: avg(|l| l.deblur),
                charbonnier: avg(|l| l.charbonnier),
                l1_deblur: avg(|l| l.l1_deblur),
                ssim_loss: avg(|l| l.ssim_loss),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub split: Split,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Config {
        run_id: String,
        seed: u64,
        config: Box<TrainConfig>,
    },
    Step(StepRecord),
    Epoch(EpochRecord),
    Eval(EvalRecord),
    /// Wall-clock facts; excluded from reproducibility comparisons.
    Summary {
        wall_clock_s: f64,
        steps: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub run_id: String,
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new(cfg: &TrainConfig) -> Self {
        let run_id = cfg.run_id();
        Self {
            records: vec![LogRecord::Config {
                run_id: run_id.clone(),
                seed: cfg.seed,
                config: Box::new(cfg.clone()),
            }],
            run_id,
        }
    }

    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn finish(&mut self, wall_clock_s: f64) {
        let steps = self.steps().count();
        self.push(LogRecord::Summary {
            wall_clock_s,
            steps,
        });
    }

    pub fn config(&self) -> Option<&TrainConfig> {
        self.records.iter().find_map(|r| match r {
            LogRecord::Config { config, .. } => Some(config.as_ref()),
            _ => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval(e) => Some(e),
            _ => None,
        })
    }

    /// JSON lines of every record that the seed and configuration fully
    /// determine: wall-clock summaries are dropped and report timestamps
    /// zeroed.
    pub fn deterministic_lines(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| !matches!(r, LogRecord::Summary { .. }))
            .map(|r| {
                let mut r = r.clone();
                if let LogRecord::Eval(e) = &mut r {
                    e.report.timestamp_unix = 0;
                }
                serde_json::to_string(&r).expect("record serialises")
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serialises"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<LogRecord>(l)
                    .map_err(|e| Error::format(path, format!("record {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let run_id = match records.first() {
            Some(LogRecord::Config { run_id, .. }) => run_id.clone(),
            _ => {
                return Err(Error::format(
                    path,
                    "run log does not start with a config record",
                ))
            }
        };
        Ok(Self { run_id, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(epoch: usize, total: f64) -> StepRecord {
        StepRecord {
            step: 0,
            epoch,
            lr: 0.1,
            batch: 2,
            loss: LossBreakdown {
                total,
                depth: Some(total),
                ..Default::default()
            },
        }
    }

    #[test]
    fn epoch_average() {
        let e = EpochRecord::average(3, 0.1, &[step(3, 1.0), step(3, 3.0)]);
        assert_eq!(e.mean.total, 2.0);
        assert_eq!(e.mean.depth, Some(2.0));
        assert_eq!(e.mean.ssim_loss, None);
    }

    #[test]
    fn jsonl_roundtrip_and_determinism_filter() {
        let mut log = RunLog::new(&TrainConfig::default());
        log.push(LogRecord::Step(step(0, 1.5)));
        log.finish(12.5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        log.save(&p).unwrap();
        let back = RunLog::load(&p).unwrap();
        assert_eq!(back, log);
        let mut other = log.clone();
        other.records.pop();
        other.finish(99.0);
        assert_ne!(other, log);
        assert_eq!(other.deterministic_lines(), log.deterministic_lines());
    }
}
