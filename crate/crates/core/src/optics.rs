//! Thin-lens defocus synthesis.
//!
//! A point at distance `x` seen through a lens of focal length `f` and
//! aperture diameter `D`, focused at `S`, spreads into a disk of diameter
//! `alpha * |x - S| / x` with `alpha = f * D / S`. The blur applied to a pixel
//! is a Gaussian whose standard deviation is a quarter of that diameter
//! (converted to pixels).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernels narrower than this (in pixels) are replaced by a delta.
pub const RHO_MIN: f64 = 0.25;
pub const DEFAULT_TRUNCATE: f64 = 3.0;
pub const DEFAULT_LEVELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThinLensCamera {
    pub focal_length_m: f64,
    pub aperture_m: f64,
    pub focus_distance_m: f64,
    /// Pixels per meter of circle-of-confusion diameter.
    pub coc_to_pixel: f64,
}

impl Default for ThinLensCamera {
    fn default() -> Self {
        Self {
            focal_length_m: 0.07,
            aperture_m: 0.0448,
            focus_distance_m: 2.0,
            coc_to_pixel: 1000.0,
        }
    }
}

impl ThinLensCamera {
    pub fn new(focus_distance_m: f64) -> Result<Self> {
        let cam = Self {
            focus_distance_m,
            ..Self::default()
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.focal_length_m > 0.0
            && self.aperture_m > 0.0
            && self.focus_distance_m > self.focal_length_m
            && self.coc_to_pixel > 0.0
            && [
                self.focal_length_m,
                self.aperture_m,
                self.focus_distance_m,
                self.coc_to_pixel,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "camera needs f > 0, D > 0, S > f and a positive pixel scale: {self:?}"
            )))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.focal_length_m / self.focus_distance_m * self.aperture_m
    }

    /// Circle-of-confusion diameter in meters for an object at `depth_m`.
    pub fn coc_diameter(&self, depth_m: f64) -> Result<f64> {
        if !(depth_m > 0.0) {
            return Err(Error::Domain(format!(
                "depth must be positive, got {depth_m}"
            )));
        }
        Ok(self.alpha() * (depth_m - self.focus_distance_m).abs() / depth_m)
    }

    /// Circle-of-confusion diameter in pixels.
    pub fn coc_pixels(&self, depth_m: f64) -> Result<f64> {
        Ok(self.coc_to_pixel * self.coc_diameter(depth_m)?)
    }
}

/// Per-pixel blur diameters (pixels) for a depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct CocMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl CocMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Grayscale rendering scaled so the largest diameter maps to 255.
    pub fn to_gray8(&self) -> Vec<u8> {
        let m = self.max();
        self.values
            .iter()
            .map(|&v| {
                if m > 0.0 {
                    (v / m * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }
}

/// Computes the COC map of a `[1, 1, h, w]` depth map in meters.
pub fn coc_map(camera: &ThinLensCamera, depth: &Tensor<f32>) -> Result<CocMap> {
    let [n, c, h, w] = depth.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::ShapeMismatch {
            op: "coc_map",
            lhs: depth.shape().to_vec(),
            rhs: vec![1, 1, h, w],
        });
    }
    let bad = depth.data().iter().filter(|&&d| !(d > 0.0)).count();
    if bad > 0 {
        return Err(Error::Domain(format!(
            "depth map has {bad} non-positive pixel(s)"
        )));
    }
    let values = depth
        .data()
        .iter()
        .map(|&d| camera.coc_pixels(d as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(CocMap {
        height: h,
        width: w,
        values,
    })
}

/// Normalised 1-D Gaussian taps of radius `ceil(truncate * rho)`.
fn gaussian_taps(rho: f64, truncate: f64) -> Vec<f64> {
    if rho < RHO_MIN {
        return vec![1.0];
    }
    let r = (truncate * rho).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * rho * rho)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Square Gaussian kernel with standard deviation `rho` pixels, normalised
/// to sum to one. Returns `(size, row-major values)`.
pub fn gaussian_kernel(rho: f64, truncate: f64) -> (usize, Vec<f64>) {
    let taps = gaussian_taps(rho.max(0.0), truncate);
    let size = taps.len();
    if size == 1 {
        return (1, vec![1.0]);
    }
    let r = (size / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .flat_map(|i| (-r..=r).map(move |j| (-((i * i + j * j) as f64) / (2.0 * rho * rho)).exp()))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    (size, k)
}

/// Mirror index into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Blurs one `h x w` plane with a separable kernel and reflect padding.
fn blur_plane(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    if taps.len() == 1 {
        return plane.to_vec();
    }
    let r = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, k)| k * row[reflect(x as i64 + t as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[reflect(y as i64 + t as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Blurs every channel of a `[1, c, h, w]` image with one Gaussian.
pub fn gaussian_blur(image: &Tensor<f32>, rho: f64, truncate: f64) -> Result<Tensor<f32>> {
    let [_, _, h, w] = image.dims4()?;
    let taps = gaussian_taps(rho, truncate);
    let data = image
        .data()
        .chunks(h * w)
        .flat_map(|p| {
            let plane: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            blur_plane(&plane, h, w, &taps)
        })
        .map(|v| v as f32)
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Settings of the layered depth-dependent blur.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefocusSettings {
    /// Number of blur levels the COC range is quantised into.
    pub levels: usize,
    pub truncate: f64,
}

impl Default for DefocusSettings {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            truncate: DEFAULT_TRUNCATE,
        }
    }
}

/// Renders the defocused version of an all-in-focus `[1, c, h, w]` image.
///
/// COC diameters are quantised into `levels` evenly spaced values between 0
/// and the map maximum; the image is blurred once per level (sigma =
/// level / 4) and each pixel takes its value from the nearest level.
pub fn defocus_image(
    aif: &Tensor<f32>,
    depth: &Tensor<f32>,
    camera: &ThinLensCamera,
    settings: &DefocusSettings,
) -> Result<Tensor<f32>> {
    let [n, c, h, w] = aif.dims4()?;
    let [_, _, dh, dw] = depth.dims4()?;
    if n != 1 || (dh, dw) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "defocus_image",
            lhs: aif.shape().to_vec(),
            rhs: depth.shape().to_vec(),
        });
    }
    if settings.levels < 2 {
        return Err(Error::Config("defocus needs at least 2 blur levels".into()));
    }
    let coc = coc_map(camera, depth)?;
    let max = coc.max();
    let step = max / (settings.levels - 1) as f64;
    let level_of: Vec<usize> = coc
        .values
        .iter()
        .map(|&e| {
            if step > 0.0 {
                (e / step).round() as usize
            } else {
                0
            }
        })
        .collect();
    let mut used = vec![false; settings.levels];
    level_of.iter().for_each(|&l| used[l] = true);

    let planes: Vec<Vec<f64>> = aif
        .data()
        .chunks(h * w)
        .map(|p| p.iter().map(|&v| v as f64).collect())
        .collect();
    let layers: Vec<Option<Vec<Vec<f64>>>> = (0..settings.levels)
        .into_par_iter()
        .map(|l| {
            used[l].then(|| {
                let rho = if l == settings.levels - 1 {
                    max
                } else {
                    l as f64 * step
                } / 4.0;
                let taps = gaussian_taps(rho, settings.truncate);
                planes.iter().map(|p| blur_plane(p, h, w, &taps)).collect()
            })
        })
        .collect();

    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for (i, &l) in level_of.iter().enumerate() {
            let layer = layers[l].as_ref().expect("level rendered");
            out.push(layer[ch][i] as f32);
        }
    }
    Tensor::new(aif.shape().to_vec(), out)
}
