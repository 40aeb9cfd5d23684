//! Procedural piecewise-planar scenes.
//!
//! A scene is a background plane plus 1-5 fronto-parallel rectangles, each
//! at a uniform random depth and covered by its own checkerboard or colour
//! gradient. Because every region has constant depth, the defocused image is
//! exactly a per-region Gaussian blur.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io;
use super::manifest::{DatasetManifest, ManifestEntry, Normalization, Split};
use super::Sample;
use crate::error::{Error, Result};
use crate::optics::{coc_map, defocus_image, DefocusSettings, ThinLensCamera};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub depth_range: (f64, f64),
    pub camera: ThinLensCamera,
    pub defocus: DefocusSettings,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            depth_range: (0.7, 10.0),
            camera: ThinLensCamera::default(),
            defocus: DefocusSettings::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "synthetic depth range must be positive and ordered, got ({lo}, {hi})"
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(
                "synthetic scenes need at least 4x4 pixels".into(),
            ));
        }
        self.camera.validate()
    }
}

enum Texture {
    Checker {
        cell: usize,
        a: [f64; 3],
        b: [f64; 3],
    },
    Gradient {
        dir: (f64, f64),
        a: [f64; 3],
        b: [f64; 3],
    },
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut colour = || [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let (a, b) = (colour(), colour());
        if rng.gen_bool(0.5) {
            Texture::Checker {
                cell: rng.gen_range(2..=8),
                a,
                b,
            }
        } else {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            Texture::Gradient {
                dir: (angle.cos(), angle.sin()),
                a,
                b,
            }
        }
    }

    fn colour(&self, y: usize, x: usize, h: usize, w: usize) -> [f64; 3] {
        match self {
            Texture::Checker { cell, a, b } => {
                if (y / cell + x / cell).is_multiple_of(2) {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient { dir, a, b } => {
                let u = (x as f64 / w as f64 - 0.5) * dir.0 + (y as f64 / h as f64 - 0.5) * dir.1;
                let t = (u + 0.75) / 1.5;
                [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
            }
        }
    }
}

/// Generates one scene. The same `(config, seed)` always yields the same
/// sample, bit for bit.
pub fn synthesize_scene(cfg: &SceneConfig, seed: u64, id: impl Into<String>) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.depth_range;
    let regions = rng.gen_range(2..=6);
    let mut depth = vec![0.0f32; h * w];
    let mut aif = vec![0.0f32; 3 * h * w];
    for r in 0..regions {
        let (y0, y1, x0, x1) = if r == 0 {
            (0, h, 0, w)
        } else {
            let rh = rng.gen_range(h / 4..=h * 3 / 4);
            let rw = rng.gen_range(w / 4..=w * 3 / 4);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            (y0, y0 + rh, x0, x0 + rw)
        };
        let z = if hi > lo { rng.gen_range(lo..=hi) } else { lo } as f32;
        let tex = Texture::random(&mut rng);
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                depth[i] = z;
                let c = tex.colour(y, x, h, w);
                for (ch, v) in c.iter().enumerate() {
                    aif[ch * h * w + i] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
                }
            }
        }
    }
    let aif = Tensor::new(vec![1, 3, h, w], aif)?;
    let depth = Tensor::new(vec![1, 1, h, w], depth)?;
    let defocused = defocus_image(&aif, &depth, &cfg.camera, &cfg.defocus)?;
    Ok(Sample {
        id: id.into(),
        aif,
        depth,
        defocused,
    })
}

/// Seed of the `index`-th scene of a dataset (SplitMix64 finaliser).
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add(
        (index as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scene: SceneConfig,
    pub count: usize,
    /// The last `test_count` scenes form the test split.
    pub test_count: usize,
    pub seed: u64,
    pub write_coc: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            count: 8,
            test_count: 0,
            seed: 0,
            write_coc: false,
        }
    }
}

/// Renders `count` scenes into `out` (`<id>_aif.png`, `<id>_depth.pfm`,
/// `<id>_defocused.png`, optionally `<id>_coc.png`) and writes
/// `manifest.tsv`, whose normalisation constants are the per-channel
/// statistics of the defocused training images.
pub fn write_dataset(out: &Path, cfg: &SynthConfig) -> Result<(PathBuf, DatasetManifest)> {
    if cfg.count == 0 || cfg.test_count > cfg.count {
        return Err(Error::Config(format!(
            "need count >= 1 and test_count <= count, got {} / {}",
            cfg.count, cfg.test_count
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = DatasetManifest::new(out, cfg.scene.depth_range, cfg.scene.camera);
    manifest.seed = cfg.seed;
    let mut train_inputs = Vec::new();
    let width = cfg.count.to_string().len().max(3);
    for i in 0..cfg.count {
        let id = format!("scene{i:0width$}");
        let s = synthesize_scene(&cfg.scene, scene_seed(cfg.seed, i), id.clone())?;
        let names = [
            format!("{id}_aif.png"),
            format!("{id}_depth.pfm"),
            format!("{id}_defocused.png"),
        ];
        io::write_rgb(&out.join(&names[0]), &s.aif)?;
        io::write_pfm(&out.join(&names[1]), &s.depth)?;
        io::write_rgb(&out.join(&names[2]), &s.defocused)?;
        if cfg.write_coc {
            let coc = coc_map(&cfg.scene.camera, &s.depth)?;
            io::write_gray8(
                &out.join(format!("{id}_coc.png")),
                coc.height,
                coc.width,
                coc.to_gray8(),
            )?;
        }
        let split = if i >= cfg.count - cfg.test_count {
            Split::Test
        } else {
            Split::Train
        };
        if split == Split::Train {
            train_inputs.push(s.defocused);
        }
        manifest.entries.push(ManifestEntry {
            id,
            image: names[0].clone().into(),
            depth: names[1].clone().into(),
            split,
            defocused: Some(names[2].clone().into()),
        });
    }
    if !train_inputs.is_empty() {
        manifest.normalization = Normalization::of_images(&train_inputs, true)?;
    }
    let path = out.join("manifest.tsv");
    manifest.save(&path)?;
    Ok((path, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let a = synthesize_scene(&cfg, 3, "a").unwrap();
        let b = synthesize_scene(&cfg, 3, "a").unwrap();
        assert_eq!(a, b);
        let c = synthesize_scene(&cfg, 4, "a").unwrap();
        assert_ne!(a.depth, c.depth);
    }

    #[test]
    fn depth_within_range_and_values_quantised() {
        let cfg = SceneConfig::default();
        for seed in 0..10 {
            let s = synthesize_scene(&cfg, seed, "s").unwrap();
            assert!(s.depth.data().iter().all(|&d| (0.7..=10.0).contains(&d)));
            assert!(s
                .aif
                .data()
                .iter()
                .all(|&v| ((v as f64 * 255.0).round() / 255.0) as f32 == v));
            let distinct: std::collections::BTreeSet<u32> =
                s.depth.data().iter().map(|d| d.to_bits()).collect();
            assert!((1..=6).contains(&distinct.len()));
        }
    }

    #[test]
    fn scene_seeds_differ() {
        assert_ne!(scene_seed(7, 0), scene_seed(7, 1));
        assert_ne!(scene_seed(7, 0), scene_seed(8, 0));
    }
}
