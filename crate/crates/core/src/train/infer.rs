//! Running a trained model on image files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::io;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Files written for one input image.
#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub input: PathBuf,
    pub depth_pfm: Option<PathBuf>,
    pub depth_png: Option<PathBuf>,
    pub deblurred_png: Option<PathBuf>,
}

/// Pads an `[n, c, h, w]` image by edge reflection so both sides are
/// multiples of 32.
fn pad_to_32(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [n, c, h, w] = t.dims4()?;
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let reflect = |i: usize, len: usize| {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let m = i % period;
        if m < len {
            m
        } else {
            period - m
        }
    };
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in d.chunks(h * w) {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                out.push(plane[sy * w + reflect(x, w)]);
            }
        }
    }
    Tensor::new(vec![n, c, ph, pw], out)
}

fn crop(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let [n, c, th, tw] = t.dims4()?;
    if (th, tw) == (h, w) {
        return Ok(t.clone());
    }
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in d.chunks(th * tw) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * tw..y * tw + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Predicts depth and/or the deblurred image for each defocused input
/// image and writes `<stem>_depth.pfm`, `<stem>_depth.png` (8-bit
/// visualisation, near is bright) and `<stem>_deblurred.png` into `out`.
/// Outputs have the input's size; inputs are reflect-padded to a multiple
/// of 32 internally.
pub fn infer(model: &Model<f32>, images: &[PathBuf], out: &Path) -> Result<Vec<InferOutput>> {
    if images.is_empty() {
        return Err(Error::Config("no input images given".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    images
        .iter()
        .map(|path| {
            let image = io::read_rgb(path)?;
            let [_, _, h, w] = image.dims4()?;
            let (depth, aif) = model.predict(&pad_to_32(&image)?)?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("bad input file name {}", path.display())))?;
            let mut result = InferOutput {
                input: path.clone(),
                depth_pfm: None,
                depth_png: None,
                deblurred_png: None,
            };
            if let Some(d) = depth {
                let d = crop(&d, h, w)?;
                let pfm = out.join(format!("{stem}_depth.pfm"));
                io::write_pfm(&pfm, &d)?;
                let (lo, hi) = d.min_max();
                let png = out.join(format!("{stem}_depth.png"));
                io::write_gray8(
                    &png,
                    h,
                    w,
                    io::depth_to_gray8(d.data(), lo as f64, hi as f64),
                )?;
                result.depth_pfm = Some(pfm);
                result.depth_png = Some(png);
            }
            if let Some(a) = aif {
                let png = out.join(format!("{stem}_deblurred.png"));
                io::write_rgb(&png, &crop(&a, h, w)?)?;
                result.deblurred_png = Some(png);
            }
            Ok(result)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_is_identity() {
        let t = Tensor::from_fn(vec![1, 3, 20, 45], |i| i as f32);
        let p = pad_to_32(&t).unwrap();
        assert_eq!(p.shape(), &[1, 3, 32, 64]);
        assert_eq!(crop(&p, 20, 45).unwrap(), t);
    }
}
