//! Training losses for the depth and deblurring heads.
//!
//! Every loss is built from tape operations, so gradients come for free.
//! Depth losses expect `[n, 1, h, w]` tensors; image losses accept any
//! matching `[n, c, h, w]` pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Hyperparameters of the hybrid objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the gradient-smoothing term inside the depth loss.
    pub mu: f64,
    /// Weight of the SSIM term inside the deblurring loss.
    pub psi: f64,
    /// Balance between depth and deblurring losses.
    pub lambda: f64,
    /// Charbonnier smoothing constant.
    pub eps_charb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 0.001,
            psi: 4.0,
            lambda: 0.01,
            eps_charb: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mu", self.mu),
            ("psi", self.psi),
            ("lambda", self.lambda),
            ("eps_charb", self.eps_charb),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Windowed SSIM settings: Gaussian window, stabilising constants
/// `c1 = (k1 L)^2`, `c2 = (k2 L)^2`, mean over pixels and channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalised `window x window` Gaussian, row-major.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let mut k: Vec<f64> = g
            .iter()
            .flat_map(|a| g.iter().map(move |b| a * b))
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

/// The five loss configurations of the loss-ablation grid, in table order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    /// `L1 + lambda * Charbonnier`
    L1Charb,
    /// `L1 + lambda * L1`
    L1L1,
    /// `(L1 + mu * Lgrad) + lambda * Charbonnier`
    L1GradCharb,
    /// `L1 + lambda * (Charbonnier + psi * (1 - SSIM))`
    L1CharbSsim,
    /// `(L1 + mu * Lgrad) + lambda * (Charbonnier + psi * (1 - SSIM))`
    #[default]
    L1GradCharbSsim,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::L1Charb,
        LossVariant::L1L1,
        LossVariant::L1GradCharb,
        LossVariant::L1CharbSsim,
        LossVariant::L1GradCharbSsim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::L1Charb => "l1+charb",
            LossVariant::L1L1 => "l1+l1",
            LossVariant::L1GradCharb => "l1grad+charb",
            LossVariant::L1CharbSsim => "l1+charb_ssim",
            LossVariant::L1GradCharbSsim => "l1grad+charb_ssim",
        }
    }

    /// Human-readable formula for reports.
    pub fn formula(self) -> &'static str {
        match self {
            LossVariant::L1Charb => "L1 + lambda*Lcharb",
            LossVariant::L1L1 => "L1 + lambda*L1",
            LossVariant::L1GradCharb => "(L1 + mu*Lgrad) + lambda*Lcharb",
            LossVariant::L1CharbSsim => "L1 + lambda*(Lcharb + psi*(1-SSIM))",
            LossVariant::L1GradCharbSsim => "(L1 + mu*Lgrad) + lambda*(Lcharb + psi*(1-SSIM))",
        }
    }

    pub fn uses_grad_smoothing(self) -> bool {
        matches!(
            self,
            LossVariant::L1GradCharb | LossVariant::L1GradCharbSsim
        )
    }

    pub fn uses_ssim(self) -> bool {
        matches!(
            self,
            LossVariant::L1CharbSsim | LossVariant::L1GradCharbSsim
        )
    }

    pub fn uses_charbonnier(self) -> bool {
        !matches!(self, LossVariant::L1L1)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Scalar values of every computed loss term, for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub depth: Option<f64>,
    pub l1_depth: Option<f64>,
    pub grad_smooth: Option<f64>,
    pub deblur: Option<f64>,
    pub charbonnier: Option<f64>,
    pub l1_deblur: Option<f64>,
    pub ssim_loss: Option<f64>,
}

fn same_shape<T: Element>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<[usize; 4]> {
    let (sa, sb) = (tape.value(a)?, tape.value(b)?);
    let dims = sa.dims4()?;
    if sa.shape() != sb.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.shape().to_vec(),
            rhs: sb.shape().to_vec(),
        });
    }
    Ok(dims)
}

fn depth_shape<T: Element>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<[usize; 4]> {
    let dims = same_shape(tape, op, a, b)?;
    if dims[1] != 1 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: dims.to_vec(),
            rhs: vec![dims[0], 1, dims[2], dims[3]],
        });
    }
    Ok(dims)
}

/// Mean absolute depth error over all pixels.
pub fn l1_depth<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    depth_shape(tape, "l1_depth", pred, gt)?;
    mean_abs_diff(tape, pred, gt)
}

fn mean_abs_diff<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d)?;
    tape.reduce_mean(a)
}

/// Gradient-smoothing term: `(sum |dx R| + sum |dy R|) / n` with
/// `R = pred - gt` and `n = N*H*W`, the full pixel count.
pub fn grad_smooth<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let [n, _, h, w] = depth_shape(tape, "grad_smooth", pred, gt)?;
    let residual = tape.sub(pred, gt)?;
    let (dx, dy) = tape.spatial_diff(residual)?;
    let ax = tape.abs(dx)?;
    let ay = tape.abs(dy)?;
    let sx = tape.reduce_sum(ax)?;
    let sy = tape.reduce_sum(ay)?;
    let s = tape.add(sx, sy)?;
    tape.scale(s, T::one() / T::from_usize(n * h * w).unwrap())
}

/// `l1_depth + mu * grad_smooth`.
pub fn depth_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    w: &LossWeights,
) -> Result<Var> {
    let l1 = l1_depth(tape, pred, gt)?;
    let gs = grad_smooth(tape, pred, gt)?;
    let weighted = tape.scale(gs, T::from_f64_lossy(w.mu))?;
    tape.add(l1, weighted)
}

/// Mean of `sqrt((pred - gt)^2 + eps^2)`.
pub fn charbonnier<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var, eps: f64) -> Result<Var> {
    same_shape(tape, "charbonnier", pred, gt)?;
    let eps = T::from_f64_lossy(eps);
    let d = tape.sub(pred, gt)?;
    let sq = tape.square(d)?;
    let root = tape.sqrt_shifted(sq, eps * eps)?;
    // Averaging the excess over eps keeps the perfect-prediction value exact.
    let excess = tape.add_scalar(root, -eps)?;
    let m = tape.reduce_mean(excess)?;
    tape.add_scalar(m, eps)
}

/// Mean absolute error between images.
pub fn l1_deblur<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, "l1_deblur", pred, gt)?;
    mean_abs_diff(tape, pred, gt)
}

/// Per-window SSIM map, `[n*c, 1, h-window+1, w-window+1]`.
pub fn ssim_map<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    cfg: &SsimConfig,
) -> Result<Var> {
    let [n, c, h, w] = same_shape(tape, "ssim", pred, gt)?;
    if h < cfg.window || w < cfg.window {
        return Err(Error::Geometry(format!(
            "ssim needs images of at least {0}x{0}, got {h}x{w}",
            cfg.window
        )));
    }
    let kernel = Tensor::new(
        vec![1, 1, cfg.window, cfg.window],
        cfg.kernel().into_iter().map(T::from_f64_lossy).collect(),
    )?;
    let k = tape.constant(kernel);
    let x = tape.reshape(pred, vec![n * c, 1, h, w])?;
    let y = tape.reshape(gt, vec![n * c, 1, h, w])?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let mut filt = |v: Var| tape.conv2d(v, k, None, 1, 0);
    let (mu_x, mu_y) = (filt(x)?, filt(y)?);
    let (e_xx, e_yy, e_xy) = (filt(xx)?, filt(yy)?, filt(xy)?);

    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let s_xx = tape.sub(e_xx, mu_xx)?;
    let s_yy = tape.sub(e_yy, mu_yy)?;
    let s_xy = tape.sub(e_xy, mu_xy)?;

    let (c1, c2) = (T::from_f64_lossy(cfg.c1()), T::from_f64_lossy(cfg.c2()));
    let two = T::from_f64_lossy(2.0);
    let a = tape.scale(mu_xy, two)?;
    let a = tape.add_scalar(a, c1)?;
    let b = tape.scale(s_xy, two)?;
    let b = tape.add_scalar(b, c2)?;
    let num = tape.mul(a, b)?;
    let d1 = tape.add(mu_xx, mu_yy)?;
    let d1 = tape.add_scalar(d1, c1)?;
    let d2 = tape.add(s_xx, s_yy)?;
    let d2 = tape.add_scalar(d2, c2)?;
    let den = tape.mul(d1, d2)?;
    tape.div(num, den)
}

/// `1 - mean SSIM`.
pub fn ssim_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    cfg: &SsimConfig,
) -> Result<Var> {
    let map = ssim_map(tape, pred, gt, cfg)?;
    let m = tape.reduce_mean(map)?;
    let neg = tape.scale(m, -T::one())?;
    tape.add_scalar(neg, T::one())
}

/// `charbonnier + psi * ssim_loss`.
pub fn deblur_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    w: &LossWeights,
    cfg: &SsimConfig,
) -> Result<Var> {
    let ch = charbonnier(tape, pred, gt, w.eps_charb)?;
    let ss = ssim_loss(tape, pred, gt, cfg)?;
    let weighted = tape.scale(ss, T::from_f64_lossy(w.psi))?;
    tape.add(ch, weighted)
}

/// Combined loss for one variant. Either head may be absent (head
/// ablation): with both present the result is `depth + lambda * deblur`,
/// with one the surviving term alone.
pub fn objective<T: Element>(
    tape: &mut Tape<T>,
    variant: LossVariant,
    w: &LossWeights,
    ssim: &SsimConfig,
    depth: Option<(Var, Var)>,
    aif: Option<(Var, Var)>,
) -> Result<(Var, LossBreakdown)> {
    let mut rec = LossBreakdown::default();
    let val = |tape: &Tape<T>, v: Var| tape.item(v).map(Element::as_f64);

    let depth_term = match depth {
        None => None,
        Some((pred, gt)) => {
            let l1 = l1_depth(tape, pred, gt)?;
            rec.l1_depth = Some(val(tape, l1)?);
            let term = if variant.uses_grad_smoothing() {
                let gs = grad_smooth(tape, pred, gt)?;
                rec.grad_smooth = Some(val(tape, gs)?);
                let weighted = tape.scale(gs, T::from_f64_lossy(w.mu))?;
                tape.add(l1, weighted)?
            } else {
                l1
            };
            rec.depth = Some(val(tape, term)?);
            Some(term)
        }
    };

    let deblur_term = match aif {
        None => None,
        Some((pred, gt)) => {
            let photometric = if variant.uses_charbonnier() {
                let c = charbonnier(tape, pred, gt, w.eps_charb)?;
                rec.charbonnier = Some(val(tape, c)?);
                c
            } else {
                let l = l1_deblur(tape, pred, gt)?;
                rec.l1_deblur = Some(val(tape, l)?);
                l
            };
            let term = if variant.uses_ssim() {
                let s = ssim_loss(tape, pred, gt, ssim)?;
                rec.ssim_loss = Some(val(tape, s)?);
                let weighted = tape.scale(s, T::from_f64_lossy(w.psi))?;
                tape.add(photometric, weighted)?
            } else {
                photometric
            };
            rec.deblur = Some(val(tape, term)?);
            Some(term)
        }
    };

    let total = match (depth_term, deblur_term) {
        (Some(d), Some(b)) => {
            let weighted = tape.scale(b, T::from_f64_lossy(w.lambda))?;
            tape.add(d, weighted)?
        }
        (Some(d), None) => d,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::Config("objective needs at least one head".into())),
    };
    rec.total = val(tape, total)?;
    Ok((total, rec))
}

/// Full two-head loss `depth + lambda * deblur` for `variant`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    depth_pred: Var,
    depth_gt: Var,
    aif_pred: Var,
    aif_gt: Var,
    w: &LossWeights,
    ssim: &SsimConfig,
    variant: LossVariant,
) -> Result<(Var, LossBreakdown)> {
    objective(
        tape,
        variant,
        w,
        ssim,
        Some((depth_pred, depth_gt)),
        Some((aif_pred, aif_gt)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(t: &mut Tape<f64>, shape: &[usize], f: impl FnMut(usize) -> f64) -> Var {
        t.constant(Tensor::from_fn(shape.to_vec(), f))
    }

    #[test]
    fn variant_names_roundtrip_in_order() {
        let names: Vec<_> = LossVariant::ALL.iter().map(|v| v.name()).collect();
        assert_eq!(
            names,
            [
                "l1+charb",
                "l1+l1",
                "l1grad+charb",
                "l1+charb_ssim",
                "l1grad+charb_ssim"
            ]
        );
        for v in LossVariant::ALL {
            assert_eq!(v.name().parse::<LossVariant>().unwrap(), v);
        }
        assert!(matches!(
            "l2".parse::<LossVariant>(),
            Err(Error::UnknownVariant(_))
        ));
    }

    #[test]
    fn offset_prediction() {
        let mut t = Tape::new();
        let gt = consts(&mut t, &[1, 1, 4, 4], |i| 1.0 + i as f64 * 0.1);
        let pred = consts(&mut t, &[1, 1, 4, 4], |i| 1.5 + i as f64 * 0.1);
        let l1 = l1_depth(&mut t, pred, gt).unwrap();
        assert!((t.item(l1).unwrap() - 0.5).abs() < 1e-12);
        let gs = grad_smooth(&mut t, pred, gt).unwrap();
        assert!(t.item(gs).unwrap().abs() < 1e-12);
        let d = depth_loss(&mut t, pred, gt, &LossWeights::default()).unwrap();
        assert!((t.item(d).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn horizontal_ramp_residual() {
        let mut t = Tape::new();
        let gt = consts(&mut t, &[1, 1, 4, 4], |_| 2.0);
        let pred = consts(&mut t, &[1, 1, 4, 4], |i| 2.0 + (i % 4) as f64);
        let gs = grad_smooth(&mut t, pred, gt).unwrap();
        assert_eq!(t.item(gs).unwrap(), 0.75);
    }

    #[test]
    fn charbonnier_values() {
        let mut t = Tape::new();
        let gt = consts(&mut t, &[1, 3, 4, 4], |i| (i as f64 * 0.3).sin());
        let c = charbonnier(&mut t, gt, gt, 1e-3).unwrap();
        assert_eq!(t.item(c).unwrap(), 1e-3);
        let pred = consts(&mut t, &[1, 3, 4, 4], |i| (i as f64 * 0.3).sin() + 0.1);
        let c = charbonnier(&mut t, pred, gt, 1e-3).unwrap();
        assert!((t.item(c).unwrap() - (0.01f64 + 1e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut t = Tape::new();
        let img = consts(&mut t, &[1, 3, 12, 12], |i| {
            ((i * 7919) % 101) as f64 / 100.0
        });
        let s = ssim_loss(&mut t, img, img, &SsimConfig::default()).unwrap();
        assert_eq!(t.item(s).unwrap(), 0.0);
        let small = consts(&mut t, &[1, 3, 8, 8], |_| 0.0);
        assert!(ssim_loss(&mut t, small, small, &SsimConfig::default()).is_err());
    }

    #[test]
    fn perfect_predictions_give_floor() {
        let mut t = Tape::new();
        let d = consts(&mut t, &[1, 1, 12, 12], |i| 1.0 + i as f64 * 0.01);
        let a = consts(&mut t, &[1, 3, 12, 12], |i| (i as f64 * 0.1).cos().abs());
        let w = LossWeights::default();
        let (total, rec) = total_loss(
            &mut t,
            d,
            d,
            a,
            a,
            &w,
            &SsimConfig::default(),
            LossVariant::default(),
        )
        .unwrap();
        assert_eq!(t.item(total).unwrap(), 1e-5);
        assert_eq!(rec.depth, Some(0.0));
        assert_eq!(rec.deblur, Some(1e-3));
        assert_eq!(rec.ssim_loss, Some(0.0));
        let db = deblur_loss(&mut t, a, a, &w, &SsimConfig::default()).unwrap();
        assert_eq!(t.item(db).unwrap(), 1e-3);
    }

    #[test]
    fn depth_losses_reject_bad_shapes() {
        let mut t = Tape::new();
        let a = consts(&mut t, &[1, 1, 4, 4], |_| 0.0);
        let b = consts(&mut t, &[1, 1, 4, 5], |_| 0.0);
        assert!(matches!(
            l1_depth(&mut t, a, b),
            Err(Error::ShapeMismatch { .. })
        ));
        let rgb = consts(&mut t, &[1, 3, 4, 4], |_| 0.0);
        assert!(l1_depth(&mut t, rgb, rgb).is_err());
        let tiny = consts(&mut t, &[1, 1, 1, 4], |_| 0.0);
        assert!(grad_smooth(&mut t, tiny, tiny).is_err());
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
