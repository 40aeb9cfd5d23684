//! Shared reference implementations for the integration tests. Each is a
//! plain index loop written without the library's kernels.

#![allow(dead_code)]

use dfdnet::loss::SsimConfig;
use dfdnet::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Zero-padded cross-correlation, weights `[cout, cin, k, k]`.
pub fn direct_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, k, _] = w.dims4().unwrap();
    let (oh, ow) = (
        (h + 2 * pad - k) / stride + 1,
        (wd + 2 * pad - k) / stride + 1,
    );
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xo * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                acc += x.data()
                                    [((b * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * cout + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// Mean SSIM over every valid window position of every plane, computed
/// window by window.
pub fn scalar_ssim(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &SsimConfig) -> f64 {
    let [n, c, h, w] = a.dims4().unwrap();
    let k = cfg.window;
    let r = (k as f64 - 1.0) / 2.0;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            g[i * k + j] = (-d2 / (2.0 * cfg.sigma * cfg.sigma)).exp();
        }
    }
    let total: f64 = g.iter().sum();
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n * c {
        let pa = &a.data()[p * h * w..(p + 1) * h * w];
        let pb = &b.data()[p * h * w..(p + 1) * h * w];
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i * k + j] / total;
                        let (va, vb) = (pa[(y + i) * w + x + j], pb[(y + i) * w + x + j]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn reflect101(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// One 2-D Gaussian (std `rho`, radius `ceil(truncate * rho)`, normalised)
/// applied to every plane with edge-mirroring padding. `rho < 0.25`
/// leaves the image unchanged.
pub fn single_kernel_blur(image: &Tensor<f32>, rho: f64, truncate: f64) -> Tensor<f64> {
    let [n, c, h, w] = image.dims4().unwrap();
    let src: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    if rho < 0.25 {
        return Tensor::new(vec![n, c, h, w], src).unwrap();
    }
    let r = (truncate * rho).ceil() as i64;
    let mut kernel = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            kernel.push((
                dy,
                dx,
                (-((dy * dy + dx * dx) as f64) / (2.0 * rho * rho)).exp(),
            ));
        }
    }
    let total: f64 = kernel.iter().map(|k| k.2).sum();
    let mut out = vec![0.0; src.len()];
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dy, dx, wt) in &kernel {
                    let sy = reflect101(y as i64 + dy, h);
                    let sx = reflect101(x as i64 + dx, w);
                    acc += wt * src[p * h * w + sy * w + sx];
                }
                out[p * h * w + y * w + x] = acc / total;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}
