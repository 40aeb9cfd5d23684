//! Line-oriented dataset manifests.
//!
//! ```text
//! #depth_min=0.7
//! #depth_max=10
//! #focus_distance=2
//! #seed=7
//! id<TAB>image<TAB>depth[<TAB>split[<TAB>defocused]]
//! ```
//!
//! Relative paths resolve against the manifest's directory. The split column
//! defaults to `train`; a missing defocused column means the defocused image
//! is synthesised on load.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::ThinLensCamera;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train|test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub split: Split,
    pub defocused: Option<PathBuf>,
}

/// Per-channel mean/std used to centre and scale network inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Per-channel statistics of `[n, 3, h, w]` images. With `quantize`,
    /// values are first rounded to 8 bits, as they read back from PNG.
    pub fn of_images<'a>(
        images: impl IntoIterator<Item = &'a Tensor<f32>>,
        quantize: bool,
    ) -> Result<Self> {
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for image in images {
            let [b, c, h, w] = image.dims4()?;
            if c != 3 {
                return Err(Error::Data(format!(
                    "expected RGB images, got {c} channels"
                )));
            }
            for (k, plane) in image.data().chunks(h * w).enumerate() {
                for &v in plane {
                    let mut v = v.clamp(0.0, 1.0) as f64;
                    if quantize {
                        v = (v * 255.0).round() / 255.0;
                    }
                    sums[k % 3] += v;
                    sq[k % 3] += v * v;
                }
            }
            n += b * h * w;
        }
        if n == 0 {
            return Err(Error::Data(
                "no images to compute normalisation from".into(),
            ));
        }
        let mean = sums.map(|s| s / n as f64);
        // The floor keeps flat synthetic channels from dividing by zero.
        let std = [0, 1, 2].map(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(1e-6).sqrt());
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub depth_range: (f64, f64),
    pub camera: ThinLensCamera,
    pub seed: u64,
    pub normalization: Normalization,
    /// Meters per unit for 16-bit PNG depth maps.
    pub depth_png_scale: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, depth_range: (f64, f64), camera: ThinLensCamera) -> Self {
        Self {
            root: root.into(),
            depth_range,
            camera,
            seed: 0,
            normalization: Normalization::default(),
            depth_png_scale: 1e-3,
            entries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid depth range ({lo}, {hi})")));
        }
        self.camera.validate()?;
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalisation std must be positive".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", e.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Data(format!("no sample `{id}` in manifest")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let c = &self.camera;
        let n = &self.normalization;
        let mut s = String::new();
        let triple = |v: [f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        for (k, v) in [
            ("depth_min", self.depth_range.0.to_string()),
            ("depth_max", self.depth_range.1.to_string()),
            ("focal_length", c.focal_length_m.to_string()),
            ("aperture", c.aperture_m.to_string()),
            ("focus_distance", c.focus_distance_m.to_string()),
            ("coc_to_pixel", c.coc_to_pixel.to_string()),
            ("seed", self.seed.to_string()),
            ("rgb_mean", triple(n.mean)),
            ("rgb_std", triple(n.std)),
            ("depth_png_scale", self.depth_png_scale.to_string()),
        ] {
            let _ = writeln!(s, "#{k}={v}");
        }
        for e in &self.entries {
            let _ = write!(
                s,
                "{}\t{}\t{}\t{}",
                e.id,
                e.image.display(),
                e.depth.display(),
                e.split.as_str()
            );
            if let Some(d) = &e.defocused {
                let _ = write!(s, "\t{}", d.display());
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>, path: &Path) -> Result<Self> {
        let mut m = Self::new(root, (0.7, 10.0), ThinLensCamera::default());
        let bad =
            |line: usize, why: String| Error::format(path, format!("line {}: {why}", line + 1));
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let Some((k, v)) = header.split_once('=') else {
                    continue;
                };
                let (k, v) = (k.trim(), v.trim());
                let num = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| bad(ln, format!("`{k}` is not a number: `{v}`")))
                };
                let triple = |v: &str| -> Result<[f64; 3]> {
                    let parts = v
                        .split(',')
                        .map(|p| num(p.trim()))
                        .collect::<Result<Vec<_>>>()?;
                    parts
                        .try_into()
                        .map_err(|_| bad(ln, format!("`{k}` needs three values")))
                };
                match k {
                    "depth_min" => m.depth_range.0 = num(v)?,
                    "depth_max" => m.depth_range.1 = num(v)?,
                    "focal_length" => m.camera.focal_length_m = num(v)?,
                    "aperture" => m.camera.aperture_m = num(v)?,
                    "focus_distance" => m.camera.focus_distance_m = num(v)?,
                    "coc_to_pixel" => m.camera.coc_to_pixel = num(v)?,
                    "seed" => {
                        m.seed = v
                            .parse()
                            .map_err(|_| bad(ln, format!("seed is not an integer: `{v}`")))?
                    }
                    "rgb_mean" => m.normalization.mean = triple(v)?,
                    "rgb_std" => m.normalization.std = triple(v)?,
                    "depth_png_scale" => m.depth_png_scale = num(v)?,
                    _ => {}
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=5).contains(&cols.len()) {
                return Err(bad(
                    ln,
                    format!("expected 3-5 tab-separated columns, got {}", cols.len()),
                ));
            }
            let split = match cols.get(3) {
                Some(s) if !s.is_empty() => s.parse().map_err(|e: Error| bad(ln, e.to_string()))?,
                _ => Split::Train,
            };
            m.entries.push(ManifestEntry {
                id: cols[0].to_string(),
                image: PathBuf::from(cols[1]),
                depth: PathBuf::from(cols[2]),
                split,
                defocused: cols.get(4).filter(|s| !s.is_empty()).map(PathBuf::from),
            });
        }
        m.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut m = DatasetManifest::new("/data", (0.0, 80.0), ThinLensCamera::new(5.0).unwrap());
        m.seed = 42;
        m.normalization.mean = [0.4, 0.45, 0.5];
        m.entries.push(ManifestEntry {
            id: "a".into(),
            image: "a.png".into(),
            depth: "a.pfm".into(),
            split: Split::Test,
            defocused: Some("a_d.png".into()),
        });
        m.entries.push(ManifestEntry {
            id: "b".into(),
            image: "b.png".into(),
            depth: "b.png".into(),
            split: Split::Train,
            defocused: None,
        });
        let back = DatasetManifest::parse(&m.to_text(), "/data", Path::new("m")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn minimal_three_columns() {
        let m = DatasetManifest::parse("x\ti.png\td.pfm\n", "r", Path::new("m")).unwrap();
        assert_eq!(m.entries[0].split, Split::Train);
        assert_eq!(m.depth_range, (0.7, 10.0));
        assert_eq!(m.resolve(Path::new("i.png")), PathBuf::from("r/i.png"));
    }

    #[test]
    fn rejects_malformed() {
        assert!(DatasetManifest::parse("x\ti.png\n", "r", Path::new("m")).is_err());
        assert!(DatasetManifest::parse("#depth_min=abc\n", "r", Path::new("m")).is_err());
        assert!(DatasetManifest::parse("x\ta\tb\nx\tc\td\n", "r", Path::new("m")).is_err());
        assert!(DatasetManifest::parse("x\ta\tb\tval\n", "r", Path::new("m")).is_err());
    }
}
