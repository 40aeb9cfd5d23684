//! Central finite-difference verification of every backward rule and every
//! loss, in double precision.
//!
//! Each case draws random small inputs, projects the output onto a random
//! direction to get a scalar, and compares the tape gradient with
//! `(f(x + h) - f(x - h)) / 2h` for every input element. Inputs that put a
//! non-differentiable point (ReLU/abs kinks) within `kink_margin` of the
//! evaluation point are redrawn.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{self, LossVariant, LossWeights, SsimConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub seed: u64,
    pub kink_margin: f64,
    /// Gradients with `|analytic| + |numeric|` below this are compared
    /// absolutely instead of relatively.
    pub abs_floor: f64,
    /// Backward rule to corrupt, to confirm the checker notices.
    #[serde(skip)]
    pub fault: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            instances: 5,
            seed: 0,
            kink_margin: 1e-3,
            abs_floor: 1e-8,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub elements: usize,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<28} {:>3} instances {:>6} elements  max error {:.3e}  {}",
                r.name,
                r.instances,
                r.elements,
                r.max_error,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} checks, tolerance {:e}: {}",
            self.results.len(),
            self.tolerance,
            if self.all_passed() {
                "all passed"
            } else {
                "FAILED"
            }
        );
        s
    }
}

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Distance of the inputs to the nearest point where the function is not
/// differentiable.
type KinkDistance = Box<dyn Fn(&[Tensor<f64>]) -> f64>;

/// One random instance: differentiable inputs, the function of them, and
/// the distance of the inputs to the nearest kink.
struct Instance {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
    kink_distance: KinkDistance,
}

fn no_kinks(_: &[Tensor<f64>]) -> f64 {
    f64::INFINITY
}

fn min_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    values
        .into_iter()
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

/// Sum of `out * r` for a fixed random `r`, so every output element
/// contributes with its own weight.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(out, r)?;
    tape.reduce_sum(p)
}

fn projected<F>(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor<f64>>,
    out_shape: Vec<usize>,
    f: F,
) -> Instance
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    let r = normal(rng, out_shape);
    Instance {
        inputs,
        forward: Box::new(move |t, v| {
            let out = f(t, v)?;
            project(t, out, &r)
        }),
        kink_distance: Box::new(no_kinks),
    }
}

/// Single standard input of `in_shape`.
fn projected1<F>(
    rng: &mut ChaCha8Rng,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    f: F,
) -> Instance
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
{
    let x = normal(rng, in_shape);
    projected(rng, vec![x], out_shape, move |t, v| f(t, v[0]))
}

fn diffs(t: &Tensor<f64>) -> Vec<f64> {
    let [n, c, h, w] = t.dims4().expect("rank 4");
    let d = t.data();
    let mut out = Vec::new();
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let i = p * h * w + y * w + x;
                if x + 1 < w {
                    out.push(d[i + 1] - d[i]);
                }
                if y + 1 < h {
                    out.push(d[i + w] - d[i]);
                }
            }
        }
    }
    out
}

fn residual(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
    )
    .expect("same shape")
}

/// Kink distance of losses built on `|pred - gt|` and, optionally, on the
/// spatial differences of the residual.
fn l1_kinks(with_diffs: bool) -> KinkDistance {
    Box::new(move |v| {
        let r = residual(&v[0], &v[1]);
        let mut m = min_abs(r.data().iter().copied());
        if with_diffs {
            m = m.min(min_abs(diffs(&r)));
        }
        m
    })
}

struct Case {
    name: &'static str,
    /// Operators whose backward rule the case exercises.
    covers: &'static [OpKind],
    draw: fn(&mut ChaCha8Rng) -> Instance,
}

fn conv_case(rng: &mut ChaCha8Rng) -> Instance {
    let stride = rng.gen_range(1..=2);
    let k = [2, 3, 4][rng.gen_range(0..3)];
    let pad = rng.gen_range(0..=1);
    let (n, cin, cout) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    );
    let (h, w) = (rng.gen_range(5..=7), rng.gen_range(5..=7));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let inputs = vec![
        normal(rng, vec![n, cin, h, w]),
        normal(rng, vec![cout, cin, k, k]),
        normal(rng, vec![cout]),
    ];
    projected(rng, inputs, vec![n, cout, oh, ow], move |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
    })
}

fn conv_transpose_case(rng: &mut ChaCha8Rng) -> Instance {
    let stride = rng.gen_range(1..=2);
    let k = [2, 3, 4][rng.gen_range(0..3)];
    let pad = rng.gen_range(0..=1.min(k - 1));
    let (n, cin, cout) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    );
    let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (w - 1) * stride + k - 2 * pad;
    let inputs = vec![
        normal(rng, vec![n, cin, h, w]),
        normal(rng, vec![cin, cout, k, k]),
        normal(rng, vec![cout]),
    ];
    projected(rng, inputs, vec![n, cout, oh, ow], move |t, v| {
        t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)
    })
}

fn batch_norm_case(rng: &mut ChaCha8Rng, train: bool) -> Instance {
    let (n, c, h, w) = (rng.gen_range(2..=3), rng.gen_range(1..=3), 3, 3);
    let inputs = vec![
        normal(rng, vec![n, c, h, w]),
        uniform(rng, vec![c], 0.5, 1.5),
        normal(rng, vec![c]),
    ];
    let running_mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let running_var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    projected(rng, inputs, vec![n, c, h, w], move |t, v| {
        let (mut m, mut s) = (running_mean.clone(), running_var.clone());
        let mode = if train {
            BatchNormMode::Train {
                running_mean: &mut m,
                running_var: &mut s,
                momentum: 0.1,
            }
        } else {
            BatchNormMode::Eval {
                running_mean: &running_mean,
                running_var: &running_var,
            }
        };
        t.batch_norm2d(v[0], v[1], v[2], mode, 1e-5)
    })
}

fn unary(
    rng: &mut ChaCha8Rng,
    f: fn(&mut Tape<f64>, Var) -> Result<Var>,
    kinked: bool,
) -> Instance {
    let shape = vec![2, 2, 3, 3];
    let mut inst = projected1(rng, shape.clone(), shape, f);
    if kinked {
        inst.kink_distance = Box::new(|v| min_abs(v[0].data().iter().copied()));
    }
    inst
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Instance {
    let shape = vec![2, 2, 3, 3];
    let inputs = vec![normal(rng, shape.clone()), normal(rng, shape.clone())];
    projected(rng, inputs, shape, move |t, v| f(t, v[0], v[1]))
}

fn pair(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Vec<Tensor<f64>> {
    vec![
        uniform(rng, shape.clone(), lo, hi),
        uniform(rng, shape, lo, hi),
    ]
}

/// Charbonnier residuals are kept at least this many `eps` from zero: its
/// curvature there is `1/eps`, and the central-difference truncation error
/// `h^2 eps^2 / (2 s^4)` with `s = sqrt(r^2 + eps^2)` only drops below the
/// tolerance for `|r|` above roughly `2.7 eps` at `h = 1e-4`.
const CHARB_MARGIN_EPS: f64 = 5.0;

/// Image pair whose residuals avoid both the L1 kink and the Charbonnier
/// high-curvature band around zero.
fn image_pair(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Vec<Tensor<f64>> {
    let gt = uniform(rng, shape.clone(), 0.0, 1.0);
    let lo = CHARB_MARGIN_EPS * LossWeights::default().eps_charb;
    let pred = Tensor::from_fn(shape, |i| {
        let g = gt.data()[i];
        let r = rng.gen_range(lo..0.3);
        if rng.gen_bool(0.5) {
            g + r
        } else {
            g - r
        }
    });
    vec![pred, gt]
}

fn scalar_loss<F>(inputs: Vec<Tensor<f64>>, kinks: KinkDistance, f: F) -> Instance
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    Instance {
        inputs,
        forward: Box::new(f),
        kink_distance: kinks,
    }
}

fn objective_case(rng: &mut ChaCha8Rng, variant: LossVariant) -> Instance {
    let mut inputs = pair(rng, vec![1, 1, 6, 6], 0.7, 10.0);
    inputs.extend(image_pair(rng, vec![1, 3, 12, 12]));
    let uses_l1_image = !variant.uses_charbonnier();
    let kinks: KinkDistance = Box::new(move |v| {
        let r = residual(&v[0], &v[1]);
        let mut m = min_abs(r.data().iter().copied());
        if variant.uses_grad_smoothing() {
            m = m.min(min_abs(diffs(&r)));
        }
        if uses_l1_image {
            m = m.min(min_abs(residual(&v[2], &v[3]).data().iter().copied()));
        }
        m
    });
    scalar_loss(inputs, kinks, move |t, v| {
        let (loss, _) = loss::objective(
            t,
            variant,
            &LossWeights::default(),
            &SsimConfig::default(),
            Some((v[0], v[1])),
            Some((v[2], v[3])),
        )?;
        Ok(loss)
    })
}

fn cases() -> Vec<Case> {
    use OpKind::*;
    vec![
        Case {
            name: "conv2d",
            covers: &[Conv2d],
            draw: conv_case,
        },
        Case {
            name: "conv_transpose2d",
            covers: &[ConvTranspose2d],
            draw: conv_transpose_case,
        },
        Case {
            name: "batch_norm2d/train",
            covers: &[BatchNorm2d],
            draw: |r| batch_norm_case(r, true),
        },
        Case {
            name: "batch_norm2d/eval",
            covers: &[BatchNorm2d],
            draw: |r| batch_norm_case(r, false),
        },
        Case {
            name: "relu",
            covers: &[Relu],
            draw: |r| unary(r, |t, x| t.relu(x), true),
        },
        Case {
            name: "abs",
            covers: &[Abs],
            draw: |r| unary(r, |t, x| t.abs(x), true),
        },
        Case {
            name: "square",
            covers: &[Square],
            draw: |r| unary(r, |t, x| t.square(x), false),
        },
        Case {
            name: "sqrt_shifted",
            covers: &[SqrtShifted],
            draw: |r| {
                let shape = vec![2, 2, 3, 3];
                let x = uniform(r, shape.clone(), 0.1, 2.0);
                projected(r, vec![x], shape, |t, v| t.sqrt_shifted(v[0], 0.01))
            },
        },
        Case {
            name: "add",
            covers: &[Add],
            draw: |r| binary(r, |t, a, b| t.add(a, b)),
        },
        Case {
            name: "sub",
            covers: &[Sub],
            draw: |r| binary(r, |t, a, b| t.sub(a, b)),
        },
        Case {
            name: "mul",
            covers: &[Mul],
            draw: |r| binary(r, |t, a, b| t.mul(a, b)),
        },
        Case {
            name: "div",
            covers: &[Div],
            draw: |r| {
                let shape = vec![2, 2, 3, 3];
                let inputs = vec![
                    normal(r, shape.clone()),
                    uniform(r, shape.clone(), 0.5, 2.0),
                ];
                projected(r, inputs, shape, |t, v| t.div(v[0], v[1]))
            },
        },
        Case {
            name: "scale",
            covers: &[Scale],
            draw: |r| unary(r, |t, x| t.scale(x, -1.7), false),
        },
        Case {
            name: "add_scalar",
            covers: &[AddScalar],
            draw: |r| unary(r, |t, x| t.add_scalar(x, 0.3), false),
        },
        Case {
            name: "concat_channels",
            covers: &[ConcatChannels],
            draw: |r| {
                let inputs = vec![normal(r, vec![2, 1, 3, 3]), normal(r, vec![2, 3, 3, 3])];
                projected(r, inputs, vec![2, 4, 3, 3], |t, v| {
                    t.concat_channels(v[0], v[1])
                })
            },
        },
        Case {
            name: "reduce_sum",
            covers: &[ReduceSum],
            draw: |r| projected1(r, vec![2, 2, 3, 3], vec![1], |t, x| t.reduce_sum(x)),
        },
        Case {
            name: "reduce_mean",
            covers: &[ReduceMean],
            draw: |r| projected1(r, vec![2, 2, 3, 3], vec![1], |t, x| t.reduce_mean(x)),
        },
        Case {
            name: "diff_x",
            covers: &[DiffX],
            draw: |r| projected1(r, vec![2, 2, 3, 4], vec![2, 2, 3, 3], |t, x| t.diff_x(x)),
        },
        Case {
            name: "diff_y",
            covers: &[DiffY],
            draw: |r| projected1(r, vec![2, 2, 4, 3], vec![2, 2, 3, 3], |t, x| t.diff_y(x)),
        },
        Case {
            name: "reshape",
            covers: &[Reshape],
            draw: |r| {
                projected1(r, vec![2, 3, 2, 2], vec![6, 1, 2, 2], |t, x| {
                    t.reshape(x, vec![6, 1, 2, 2])
                })
            },
        },
        Case {
            name: "loss/l1_depth",
            covers: &[],
            draw: |r| {
                scalar_loss(
                    pair(r, vec![2, 1, 4, 4], 0.7, 10.0),
                    l1_kinks(false),
                    |t, v| loss::l1_depth(t, v[0], v[1]),
                )
            },
        },
        Case {
            name: "loss/grad_smooth",
            covers: &[],
            draw: |r| {
                scalar_loss(
                    pair(r, vec![2, 1, 4, 4], 0.7, 10.0),
                    l1_kinks(true),
                    |t, v| loss::grad_smooth(t, v[0], v[1]),
                )
            },
        },
        Case {
            name: "loss/depth",
            covers: &[],
            draw: |r| {
                scalar_loss(
                    pair(r, vec![2, 1, 4, 4], 0.7, 10.0),
                    l1_kinks(true),
                    |t, v| loss::depth_loss(t, v[0], v[1], &LossWeights::default()),
                )
            },
        },
        Case {
            name: "loss/charbonnier",
            covers: &[],
            draw: |r| {
                scalar_loss(
                    image_pair(r, vec![1, 3, 4, 4]),
                    Box::new(no_kinks),
                    |t, v| loss::charbonnier(t, v[0], v[1], 1e-3),
                )
            },
        },
        Case {
            name: "loss/l1_deblur",
            covers: &[],
            draw: |r| {
                scalar_loss(
                    pair(r, vec![1, 3, 4, 4], 0.0, 1.0),
                    l1_kinks(false),
                    |t, v| loss::l1_deblur(t, v[0], v[1]),
                )
            },
        },
        Case {
            name: "loss/ssim",
            covers: &[],
            draw: |r| {
                scalar_loss(
                    pair(r, vec![1, 2, 12, 13], 0.0, 1.0),
                    Box::new(no_kinks),
                    |t, v| loss::ssim_loss(t, v[0], v[1], &SsimConfig::default()),
                )
            },
        },
        Case {
            name: "loss/deblur",
            covers: &[],
            draw: |r| {
                scalar_loss(
                    image_pair(r, vec![1, 3, 12, 12]),
                    Box::new(no_kinks),
                    |t, v| {
                        loss::deblur_loss(
                            t,
                            v[0],
                            v[1],
                            &LossWeights::default(),
                            &SsimConfig::default(),
                        )
                    },
                )
            },
        },
        Case {
            name: "objective/l1+charb",
            covers: &[],
            draw: |r| objective_case(r, LossVariant::L1Charb),
        },
        Case {
            name: "objective/l1+l1",
            covers: &[],
            draw: |r| objective_case(r, LossVariant::L1L1),
        },
        Case {
            name: "objective/l1grad+charb",
            covers: &[],
            draw: |r| objective_case(r, LossVariant::L1GradCharb),
        },
        Case {
            name: "objective/l1+charb_ssim",
            covers: &[],
            draw: |r| objective_case(r, LossVariant::L1CharbSsim),
        },
        Case {
            name: "objective/l1grad+charb_ssim",
            covers: &[],
            draw: |r| objective_case(r, LossVariant::L1GradCharbSsim),
        },
    ]
}

/// Names of every check in the suite, in run order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Operators covered by at least one dedicated case.
pub fn covered_ops() -> Vec<OpKind> {
    let mut ops: Vec<OpKind> = cases()
        .iter()
        .flat_map(|c| c.covers.iter().copied())
        .collect();
    ops.sort();
    ops.dedup();
    ops
}

fn evaluate(inst: &Instance, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (inst.forward)(&mut tape, &vars)?;
    tape.item(out)
}

/// Largest elementwise error of one instance.
fn check_instance(inst: &Instance, cfg: &GradcheckConfig) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    tape.inject_fault(cfg.fault);
    let vars: Vec<Var> = inst
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = (inst.forward)(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut elements = 0;
    let mut probe = inst.inputs.clone();
    for (k, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad(v)?
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inst.inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = probe[k].data()[i];
            probe[k].data_mut()[i] = x0 + cfg.step;
            let plus = evaluate(inst, &probe)?;
            probe[k].data_mut()[i] = x0 - cfg.step;
            let minus = evaluate(inst, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = if a.abs() + numeric.abs() < cfg.abs_floor {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            worst = worst.max(err);
            elements += 1;
        }
    }
    Ok((worst, elements))
}

fn run_case(case: &Case, index: usize, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut max_error: f64 = 0.0;
    let mut elements = 0;
    for _ in 0..cfg.instances {
        let mut tries = 0;
        let inst = loop {
            let inst = (case.draw)(&mut rng);
            if (inst.kink_distance)(&inst.inputs) >= cfg.kink_margin {
                break inst;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::Numerical(format!(
                    "{}: could not draw an instance away from kinks",
                    case.name
                )));
            }
        };
        let (err, n) = check_instance(&inst, cfg)?;
        max_error = max_error.max(err);
        elements += n;
    }
    Ok(CheckResult {
        name: case.name.to_string(),
        instances: cfg.instances,
        elements,
        max_error,
        passed: max_error <= cfg.tolerance,
    })
}

/// Runs every case; errors only on failures to evaluate, not on gradient
/// mismatches (those are reported per case).
pub fn run_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config(
            "gradcheck needs instances >= 1 and a positive step".into(),
        ));
    }
    let results = cases()
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        results,
    })
}

/// Runs only the cases whose name starts with `prefix`.
pub fn run_matching(cfg: &GradcheckConfig, prefix: &str) -> Result<GradcheckReport> {
    let results = cases()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.name.starts_with(prefix))
        .map(|(i, c)| run_case(c, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_a_case() {
        let covered = covered_ops();
        for op in OpKind::DIFFERENTIABLE {
            assert!(covered.contains(&op), "{op:?} has no gradient check");
        }
    }

    #[test]
    fn conv_cases_pass() {
        let report = run_matching(&GradcheckConfig::default(), "conv").unwrap();
        assert_eq!(report.results.len(), 2);
        assert!(report.all_passed(), "{}", report.to_text());
    }

    #[test]
    fn full_suite_passes() {
        let report = run_suite(&GradcheckConfig::default()).unwrap();
        assert!(report.all_passed(), "{}", report.to_text());
        assert_eq!(report.results.len(), case_names().len());
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = GradcheckConfig {
            fault: Some(OpKind::Relu),
            instances: 1,
            ..Default::default()
        };
        let report = run_matching(&cfg, "relu").unwrap();
        assert!(!report.all_passed());
    }
}
