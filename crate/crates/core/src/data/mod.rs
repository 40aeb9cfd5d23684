//! Samples, manifests, augmentation and deterministic batching.

pub mod io;
pub mod manifest;
pub mod synth;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use manifest::{DatasetManifest, ManifestEntry, Normalization, Split};
pub use synth::{scene_seed, synthesize_scene, write_dataset, SceneConfig, SynthConfig};

use crate::error::{Error, Result};
use crate::optics::{defocus_image, DefocusSettings};
use crate::tensor::Tensor;

/// One training example. Images are `[1, 3, h, w]` in `[0, 1]`; depth is
/// `[1, 1, h, w]` in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub aif: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub defocused: Tensor<f32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.aif.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.aif.shape()[3]
    }

    pub fn flip_horizontal(&self) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            aif: self.aif.flip_horizontal()?,
            depth: self.depth.flip_horizontal()?,
            defocused: self.defocused.flip_horizontal()?,
        })
    }
}

/// Bilinear resize (pixel-centre aligned) of an `[n, c, h, w]` tensor.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = t.dims4()?;
    let src = |o: usize, in_len: usize, out_len: usize| {
        let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(in_len - 1);
        (i0, (i0 + 1).min(in_len - 1), s - i0 as f64)
    };
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in d.chunks(h * w) {
        for oy in 0..out_h {
            let (y0, y1, fy) = src(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = src(ox, w, out_w);
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Nearest-neighbour resize; used for depth so no new depth values appear.
pub fn resize_nearest(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = t.dims4()?;
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in d.chunks(h * w) {
        for oy in 0..out_h {
            let y = ((oy * 2 + 1) * h / (2 * out_h)).min(h - 1);
            for ox in 0..out_w {
                let x = ((ox * 2 + 1) * w / (2 * out_w)).min(w - 1);
                out.push(plane[y * w + x]);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Loads one sample. The depth map must lie inside the manifest's declared
/// range; without a defocused file the defocused image is rendered from the
/// all-in-focus image. With `size`, images are resized (bilinear) and depth
/// resampled (nearest) before any rendering.
pub fn load_sample(
    manifest: &DatasetManifest,
    id: &str,
    size: Option<(usize, usize)>,
    defocus: &DefocusSettings,
) -> Result<Sample> {
    let e = manifest.entry(id)?;
    let image_path = manifest.resolve(&e.image);
    let depth_path = manifest.resolve(&e.depth);
    let mut aif = io::read_rgb(&image_path)?;
    let mut depth = io::read_depth(&depth_path, manifest.depth_png_scale)?;
    if aif.shape()[2..] != depth.shape()[2..] {
        return Err(Error::Data(format!(
            "{id}: image {:?} and depth {:?} differ in size",
            &aif.shape()[2..],
            &depth.shape()[2..]
        )));
    }
    let (lo, hi) = manifest.depth_range;
    if let Some(bad) = depth
        .data()
        .iter()
        .find(|&&d| !(d as f64 >= lo && d as f64 <= hi))
    {
        return Err(Error::Data(format!(
            "{}: depth {bad} outside declared range [{lo}, {hi}]",
            depth_path.display()
        )));
    }
    let mut defocused = match &e.defocused {
        Some(p) => {
            let d = io::read_rgb(&manifest.resolve(p))?;
            if d.shape() != aif.shape() {
                return Err(Error::Data(format!(
                    "{id}: defocused image {:?} does not match {:?}",
                    d.shape(),
                    aif.shape()
                )));
            }
            Some(d)
        }
        None => None,
    };
    if let Some((h, w)) = size {
        if (aif.shape()[2], aif.shape()[3]) != (h, w) {
            aif = resize_bilinear(&aif, h, w)?;
            depth = resize_nearest(&depth, h, w)?;
            defocused = defocused.map(|d| resize_bilinear(&d, h, w)).transpose()?;
        }
    }
    let defocused = match defocused {
        Some(d) => d,
        None => defocus_image(&aif, &depth, &manifest.camera, defocus)?,
    };
    Ok(Sample {
        id: id.to_string(),
        aif,
        depth,
        defocused,
    })
}

/// Flips the sample horizontally with probability 1/2. Nothing that alters
/// blur is applied.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    if rng.gen_bool(0.5) {
        sample.flip_horizontal()
    } else {
        Ok(sample.clone())
    }
}

/// Per-channel `(x - mean) / std` of an `[n, 3, h, w]` image.
pub fn normalize(image: &Tensor<f32>, norm: &Normalization) -> Result<Tensor<f32>> {
    let [_, c, h, w] = image.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            lhs: image.shape().to_vec(),
            rhs: vec![3],
        });
    }
    let mut out = image.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (norm.mean[i % 3] as f32, norm.std[i % 3] as f32);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// Epoch-seeded permutation of `0..n` chunked into batches; the last batch
/// may be partial.
pub fn batch_order(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Network-ready batch: `input` is the normalised defocused image,
/// `defocused` the raw one fed to the joint layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub input: Tensor<f32>,
    pub defocused: Tensor<f32>,
    pub aif: Tensor<f32>,
    pub depth: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], norm: &Normalization) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let stack = |f: fn(&Sample) -> &Tensor<f32>| {
            Tensor::stack(&samples.iter().map(f).collect::<Vec<_>>())
        };
        let defocused = stack(|s| &s.defocused)?;
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            input: normalize(&defocused, norm)?,
            defocused,
            aif: stack(|s| &s.aif)?,
            depth: stack(|s| &s.depth)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Samples of a manifest held in memory, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn load(
        manifest: DatasetManifest,
        size: Option<(usize, usize)>,
        defocus: &DefocusSettings,
    ) -> Result<Self> {
        manifest.validate()?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| load_sample(&manifest, &e.id, size, defocus))
            .collect::<Result<Vec<_>>>()?;
        let splits = manifest.entries.iter().map(|e| e.split).collect();
        Ok(Self {
            manifest,
            samples,
            splits,
        })
    }

    /// `count` synthesized scenes, all in the training split, with the
    /// input normalisation computed from their defocused images.
    pub fn synthetic(scene: &SceneConfig, count: usize, seed: u64) -> Result<Self> {
        let samples = (0..count)
            .map(|i| synthesize_scene(scene, scene_seed(seed, i), format!("scene{i:03}")))
            .collect::<Result<Vec<_>>>()?;
        let mut manifest = DatasetManifest::new(".", scene.depth_range, scene.camera);
        manifest.seed = seed;
        manifest.normalization =
            Normalization::of_images(samples.iter().map(|s| &s.defocused), false)?;
        Ok(Self::from_samples(manifest, samples))
    }

    /// Wraps in-memory samples, all in the training split.
    pub fn from_samples(manifest: DatasetManifest, samples: Vec<Sample>) -> Self {
        let splits = vec![Split::Train; samples.len()];
        Self {
            manifest,
            samples,
            splits,
        }
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(x, _)| x)
            .collect()
    }

    /// The batches of one epoch: shuffled order from `(seed, epoch)`, each
    /// sample flipped with probability 1/2 when `augment_flips` is set.
    pub fn epoch_batches(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        epoch: usize,
        augment_flips: bool,
    ) -> Result<Vec<Batch>> {
        let pool = self.split(split);
        let order = batch_order(pool.len(), batch_size, seed, epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, usize::MAX));
        rng.set_stream(epoch as u64);
        order
            .iter()
            .map(|idx| {
                let samples = idx
                    .iter()
                    .map(|&i| {
                        if augment_flips {
                            augment(pool[i], &mut rng)
                        } else {
                            Ok(pool[i].clone())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Batch::from_samples(&samples, &self.manifest.normalization)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_order_is_deterministic_and_complete() {
        let a = batch_order(10, 4, 1, 0).unwrap();
        assert_eq!(a, batch_order(10, 4, 1, 0).unwrap());
        assert_eq!(a.len(), 3);
        assert_eq!(a[2].len(), 2);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batch_order(0, 4, 1, 0).is_err());
        assert!(batch_order(3, 0, 1, 0).is_err());
    }

    #[test]
    fn epochs_reshuffle() {
        let a = batch_order(100, 100, 5, 0).unwrap();
        let b = batch_order(100, 100, 5, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::from_fn(vec![1, 3, 4, 6], |i| i as f32);
        assert_eq!(resize_bilinear(&t, 4, 6).unwrap(), t);
        assert_eq!(resize_nearest(&t, 4, 6).unwrap(), t);
        let c = Tensor::full(vec![1, 1, 5, 7], 2.5f32);
        let r = resize_bilinear(&c, 3, 9).unwrap();
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn normalisation_per_channel() {
        let img = Tensor::from_fn(vec![1, 3, 1, 2], |i| (i / 2) as f32);
        let n = Normalization {
            mean: [0.0, 1.0, 2.0],
            std: [1.0, 2.0, 4.0],
        };
        assert_eq!(normalize(&img, &n).unwrap().data(), &[0.0; 6]);
    }
}
