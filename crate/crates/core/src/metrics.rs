//! Depth and image-quality metrics and their aggregation into reports.

use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{ssim_loss, SsimConfig};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// `delta(k)` counts pixels whose ratio is below `delta_base^k`.
    pub delta_base: f64,
    pub psnr_peak: f64,
    /// Value reported for a zero-error image pair.
    pub psnr_cap_db: f64,
    pub c1_cap_m: f64,
    pub c2_cap_m: f64,
    /// Ground-truth pixels shallower than this are excluded; predictions
    /// are clamped to it before ratios are taken.
    pub min_valid_depth: f64,
    pub ssim: SsimConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            delta_base: 1.25,
            psnr_peak: 1.0,
            psnr_cap_db: 100.0,
            c1_cap_m: 70.0,
            c2_cap_m: 80.0,
            min_valid_depth: 1e-3,
            ssim: SsimConfig::default(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_base > 1.0) {
            return Err(Error::Config("delta_base must exceed 1".into()));
        }
        if !(self.c1_cap_m > 0.0 && self.c1_cap_m < self.c2_cap_m) {
            return Err(Error::Config("need 0 < c1 cap < c2 cap".into()));
        }
        if !(self.min_valid_depth > 0.0 && self.psnr_peak > 0.0) {
            return Err(Error::Config(
                "min_valid_depth and psnr_peak must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixels: usize,
}

fn depth_metrics_where(
    pred: &[f32],
    gt: &[f32],
    cfg: &MetricConfig,
    keep: impl Fn(f64) -> bool,
) -> Option<DepthMetrics> {
    let (mut sq, mut rel, mut n) = (0.0, 0.0, 0usize);
    let mut hits = [0usize; 3];
    let thresholds = [1, 2, 3].map(|k| cfg.delta_base.powi(k));
    for (&p, &g) in pred.iter().zip(gt) {
        let g = g as f64;
        if !(g >= cfg.min_valid_depth) || !keep(g) {
            continue;
        }
        let p = p as f64;
        let d = p - g;
        sq += d * d;
        rel += d.abs() / g;
        let pc = p.max(cfg.min_valid_depth);
        let ratio = (pc / g).max(g / pc);
        for (h, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *h += 1;
            }
        }
        n += 1;
    }
    (n > 0).then(|| {
        let nf = n as f64;
        DepthMetrics {
            rmse: (sq / nf).sqrt(),
            abs_rel: rel / nf,
            delta1: hits[0] as f64 / nf,
            delta2: hits[1] as f64 / nf,
            delta3: hits[2] as f64 / nf,
            valid_pixels: n,
        }
    })
}

fn check_same(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// RMSE, Abs-Rel and threshold accuracies over ground-truth pixels at least
/// `min_valid_depth` deep.
pub fn depth_metrics(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    cfg: &MetricConfig,
) -> Result<DepthMetrics> {
    check_same("depth_metrics", pred, gt)?;
    depth_metrics_where(pred.data(), gt.data(), cfg, |_| true)
        .ok_or_else(|| Error::Data("no valid ground-truth depth pixels".into()))
}

/// Depth metrics restricted to ground truth within the C1 and C2 caps;
/// `None` marks an empty range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangedMetrics {
    pub c1: Option<DepthMetrics>,
    pub c2: Option<DepthMetrics>,
}

pub fn ranged_depth_metrics(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    cfg: &MetricConfig,
) -> Result<RangedMetrics> {
    check_same("ranged_depth_metrics", pred, gt)?;
    Ok(RangedMetrics {
        c1: depth_metrics_where(pred.data(), gt.data(), cfg, |g| g <= cfg.c1_cap_m),
        c2: depth_metrics_where(pred.data(), gt.data(), cfg, |g| g <= cfg.c2_cap_m),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// The images were identical and `db` is the configured cap.
    pub exact: bool,
}

pub fn psnr(pred: &Tensor<f32>, gt: &Tensor<f32>, peak: f64, cap_db: f64) -> Result<Psnr> {
    check_same("psnr", pred, gt)?;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    let mse = sq / pred.len().max(1) as f64;
    Ok(if mse == 0.0 {
        Psnr {
            db: cap_db,
            exact: true,
        }
    } else {
        Psnr {
            db: (10.0 * (peak * peak / mse).log10()).min(cap_db),
            exact: false,
        }
    })
}

/// Windowed SSIM, defined as one minus the SSIM training loss on the same
/// inputs (computed in double precision, no gradients).
pub fn ssim_metric(pred: &Tensor<f32>, gt: &Tensor<f32>, cfg: &SsimConfig) -> Result<f64> {
    check_same("ssim_metric", pred, gt)?;
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(pred.cast());
    let g = tape.constant(gt.cast());
    let l = ssim_loss(&mut tape, p, g, cfg)?;
    Ok(1.0 - tape.item(l)?)
}

/// Averages of per-sample depth metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthSummary {
    pub rmse: f64,
    pub abs_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthSummary {
    fn mean(items: &[DepthMetrics]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&DepthMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self {
            rmse: avg(|m| m.rmse),
            abs_rel: avg(|m| m.abs_rel),
            delta1: avg(|m| m.delta1),
            delta2: avg(|m| m.delta2),
            delta3: avg(|m| m.delta3),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Samples whose PSNR hit the cap because the images were identical.
    pub exact_samples: usize,
}

/// Averaged evaluation results. Depth and image parts are absent when the
/// model lacks the corresponding head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub depth: Option<DepthSummary>,
    pub image: Option<ImageSummary>,
    pub c1: Option<DepthSummary>,
    pub c2: Option<DepthSummary>,
    /// Ranged metrics were requested but a range held no pixels.
    pub empty_ranges: Vec<String>,
    pub config: MetricConfig,
    pub timestamp_unix: u64,
}

impl PartialEq for MetricReport {
    /// Equality ignores the timestamp.
    fn eq(&self, o: &Self) -> bool {
        self.samples == o.samples
            && self.depth == o.depth
            && self.image == o.image
            && self.c1 == o.c1
            && self.c2 == o.c2
            && self.empty_ranges == o.empty_ranges
            && self.config == o.config
    }
}

/// Column header of the comparison tables.
pub const CSV_COLUMNS: [&str; 7] = [
    "rmse", "abs_rel", "delta1", "delta2", "delta3", "psnr_db", "ssim",
];

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn csv_header() -> String {
        format!("label,{}", CSV_COLUMNS.join(","))
    }

    /// One CSV row; absent metrics are empty cells.
    pub fn csv_row(&self, label: &str) -> String {
        let d = self.depth;
        let i = self.image;
        [
            label.to_string(),
            cell(d.map(|d| d.rmse)),
            cell(d.map(|d| d.abs_rel)),
            cell(d.map(|d| d.delta1)),
            cell(d.map(|d| d.delta2)),
            cell(d.map(|d| d.delta3)),
            cell(i.map(|i| i.psnr_db)),
            cell(i.map(|i| i.ssim)),
        ]
        .join(",")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub depth: Option<DepthMetrics>,
    pub ranged: Option<RangedMetrics>,
    pub psnr: Option<Psnr>,
    pub ssim: Option<f64>,
}

impl SampleMetrics {
    /// Row in [`MetricReport::csv_header`] layout, labelled with the id.
    pub fn csv_row(&self) -> String {
        let d = self.depth;
        [
            self.id.clone(),
            cell(d.map(|d| d.rmse)),
            cell(d.map(|d| d.abs_rel)),
            cell(d.map(|d| d.delta1)),
            cell(d.map(|d| d.delta2)),
            cell(d.map(|d| d.delta3)),
            cell(self.psnr.map(|p| p.db)),
            cell(self.ssim),
        ]
        .join(",")
    }
}

/// Metrics of one prediction. Images are clamped to `[0, 1]` first.
pub fn sample_metrics(
    id: &str,
    depth: Option<(&Tensor<f32>, &Tensor<f32>)>,
    image: Option<(&Tensor<f32>, &Tensor<f32>)>,
    ranged: bool,
    cfg: &MetricConfig,
) -> Result<SampleMetrics> {
    let clamp = |t: &Tensor<f32>| t.map(|v| v.clamp(0.0, 1.0));
    let (mut dm, mut rm, mut ps, mut ss) = (None, None, None, None);
    if let Some((p, g)) = depth {
        dm = Some(depth_metrics(p, g, cfg)?);
        if ranged {
            rm = Some(ranged_depth_metrics(p, g, cfg)?);
        }
    }
    if let Some((p, g)) = image {
        let p = clamp(p);
        ps = Some(psnr(&p, g, cfg.psnr_peak, cfg.psnr_cap_db)?);
        ss = Some(ssim_metric(&p, g, &cfg.ssim)?);
    }
    Ok(SampleMetrics {
        id: id.to_string(),
        depth: dm,
        ranged: rm,
        psnr: ps,
        ssim: ss,
    })
}

/// Averages per-sample metrics in the given order.
pub fn aggregate(
    per_sample: &[SampleMetrics],
    ranged: bool,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if per_sample.is_empty() {
        return Err(Error::Data("cannot report on zero samples".into()));
    }
    let depth: Vec<DepthMetrics> = per_sample.iter().filter_map(|s| s.depth).collect();
    let c1: Vec<DepthMetrics> = per_sample.iter().filter_map(|s| s.ranged?.c1).collect();
    let c2: Vec<DepthMetrics> = per_sample.iter().filter_map(|s| s.ranged?.c2).collect();
    let psnrs: Vec<Psnr> = per_sample.iter().filter_map(|s| s.psnr).collect();
    let ssims: Vec<f64> = per_sample.iter().filter_map(|s| s.ssim).collect();
    let image = (!psnrs.is_empty()).then(|| ImageSummary {
        psnr_db: psnrs.iter().map(|p| p.db).sum::<f64>() / psnrs.len() as f64,
        ssim: ssims.iter().sum::<f64>() / ssims.len() as f64,
        exact_samples: psnrs.iter().filter(|p| p.exact).count(),
    });
    let mut empty_ranges = Vec::new();
    if ranged {
        if c1.is_empty() {
            empty_ranges.push("c1".to_string());
        }
        if c2.is_empty() {
            empty_ranges.push("c2".to_string());
        }
    }
    Ok(MetricReport {
        samples: per_sample.len(),
        depth: DepthSummary::mean(&depth),
        image,
        c1: DepthSummary::mean(&c1),
        c2: DepthSummary::mean(&c2),
        empty_ranges,
        config: *cfg,
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

/// Runs the model on every sample of `split` and averages the per-sample
/// metrics. C1/C2 ranges are reported when the dataset's depth range
/// extends past the C1 cap.
pub fn evaluate_split(
    model: &Model<f32>,
    dataset: &Dataset,
    split: Split,
    cfg: &MetricConfig,
) -> Result<(MetricReport, Vec<SampleMetrics>)> {
    cfg.validate()?;
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", split.as_str())));
    }
    let ranged = dataset.manifest.depth_range.1 > cfg.c1_cap_m;
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let (depth, aif) = model.predict(&s.defocused)?;
            sample_metrics(
                &s.id,
                depth.as_ref().map(|d| (d, &s.depth)),
                aif.as_ref().map(|a| (a, &s.aif)),
                ranged,
                cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&per_sample, ranged, cfg)?, per_sample))
}
