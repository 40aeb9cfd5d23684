//! Plain-text run configuration: `key = value` lines, `#`/`;` comment lines,
//! trailing ` # ...` comments and optional `[section]` headers (ignored,
//! for readability only).
//!
//! Values are layered with precedence: flags, then environment
//! (`DFDNET_<KEY>`), then file, then defaults. Every key is listed in [`KEYS`]; anything else is an
//! error so typos fail fast.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::DefocusSettings;
use crate::train::TrainConfig;

/// Prefix of environment overrides, e.g. `DFDNET_EPOCHS=50`.
pub const ENV_PREFIX: &str = "DFDNET_";

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("manifest", "dataset manifest path"),
    ("out", "output directory"),
    (
        "image_size",
        "resize samples on load, `HxW` or `N` (empty: keep)",
    ),
    ("epochs", "passes over the training split"),
    ("batch_size", "samples per step"),
    ("learning_rate", "SGD step size"),
    ("momentum", "SGD momentum"),
    (
        "decay_epoch",
        "epoch of the learning-rate drop (empty: automatic)",
    ),
    (
        "decay_fraction",
        "decay point as a fraction of epochs when not 500",
    ),
    ("decay_factor", "learning-rate multiplier after the drop"),
    ("variant", "loss variant name"),
    ("mu", "gradient-smoothing weight"),
    ("psi", "SSIM weight"),
    ("lambda", "deblurring-loss weight"),
    ("eps_charb", "Charbonnier constant"),
    ("input_size", "nominal network input, `HxW` or `N`"),
    ("width_scale", "multiplier on the channel schedule"),
    ("dense_block_layers", "convolutions per encoder dense block"),
    ("use_skips", "encoder-decoder skip connections"),
    ("ablation", "both | depth_only | deblur_only"),
    ("seed", "run seed"),
    (
        "eval_every",
        "evaluate and checkpoint every N epochs (0: end only)",
    ),
    ("augment", "random horizontal flips"),
    (
        "depth_bias_init",
        "start the depth head at the mean training depth",
    ),
    (
        "defocus_levels",
        "blur levels used when rendering defocused inputs",
    ),
];

/// Where the effective value of a key came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

/// Effective configuration of a CLI run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub image_size: Option<(usize, usize)>,
    pub defocus: DefocusSettings,
    pub train: TrainConfig,
    /// Keys set above the default layer, in application order.
    pub overrides: Vec<(String, Source)>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{v}`"
        ))),
    }
}

/// `HxW` or a single `N` for a square size.
pub fn parse_size(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse_num(key, h.trim())?, parse_num(key, w.trim())?)),
        None => {
            let n = parse_num(key, v)?;
            Ok((n, n))
        }
    }
}

fn optional<T>(v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn format_size(s: (usize, usize)) -> String {
    format!("{}x{}", s.0, s.1)
}

/// Parses the text of a config file into ordered `(key, value)` pairs.
pub fn parse_ini(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty()
            || line.starts_with('#')
            || line.starts_with(';')
            || line.starts_with('[')
        {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        // Inline comments need leading whitespace so `#` can appear in paths.
        let v = v.find(" #").map_or(v, |i| &v[..i]);
        pairs.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Sets one key, recording where the value came from.
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        let key = key.replace('-', "_");
        let t = &mut self.train;
        let v = value.trim();
        match key.as_str() {
            "manifest" => self.manifest = optional(v, |s| Ok(PathBuf::from(s)))?,
            "out" => self.out = optional(v, |s| Ok(PathBuf::from(s)))?,
            "image_size" => self.image_size = optional(v, |s| parse_size(&key, s))?,
            "epochs" => t.epochs = parse_num(&key, v)?,
            "batch_size" => t.batch_size = parse_num(&key, v)?,
            "learning_rate" => t.optimizer.learning_rate = parse_num(&key, v)?,
            "momentum" => t.optimizer.momentum = parse_num(&key, v)?,
            "decay_epoch" => t.decay_epoch = optional(v, |s| parse_num(&key, s))?,
            "decay_fraction" => t.decay_fraction = parse_num(&key, v)?,
            "decay_factor" => t.optimizer.decay_factor = parse_num(&key, v)?,
            "variant" => t.variant = v.parse()?,
            "mu" => t.weights.mu = parse_num(&key, v)?,
            "psi" => t.weights.psi = parse_num(&key, v)?,
            "lambda" => t.weights.lambda = parse_num(&key, v)?,
            "eps_charb" => t.weights.eps_charb = parse_num(&key, v)?,
            "input_size" => t.model.input_size = parse_size(&key, v)?,
            "width_scale" => t.model.width_scale = parse_num(&key, v)?,
            "dense_block_layers" => t.model.dense_block_layers = parse_num(&key, v)?,
            "use_skips" => t.model.use_skips = parse_bool(&key, v)?,
            "ablation" => t.ablation = v.parse()?,
            "seed" => t.seed = parse_num(&key, v)?,
            "eval_every" => t.eval_every = parse_num(&key, v)?,
            "augment" => t.augment = parse_bool(&key, v)?,
            "depth_bias_init" => t.depth_bias_init = parse_bool(&key, v)?,
            "defocus_levels" => self.defocus.levels = parse_num(&key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        self.overrides.retain(|(k, _)| *k != key);
        self.overrides.push((key, source));
        Ok(())
    }

    /// Applies the file layer.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_ini(&text)? {
            self.set(&k, &v, Source::File)?;
        }
        Ok(())
    }

    /// Applies the environment layer from `vars` (normally
    /// `std::env::vars()`); variables outside [`KEYS`] are ignored.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                KEYS.iter()
                    .any(|(name, _)| *name == key)
                    .then_some((key, v))
            })
            .collect();
        // Environment order is unspecified; sort for reproducible overrides.
        found.sort();
        for (k, v) in found {
            self.set(&k, &v, Source::Env)?;
        }
        Ok(())
    }

    /// Builds the layered configuration: defaults, then `file`, then the
    /// environment, then `flags`.
    pub fn layered(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in flags {
            cfg.set(k, v, Source::Flag)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn value_of(&self, key: &str) -> String {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        match key {
            "manifest" => path(&self.manifest),
            "out" => path(&self.out),
            "image_size" => self.image_size.map(format_size).unwrap_or_default(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.optimizer.learning_rate.to_string(),
            "momentum" => t.optimizer.momentum.to_string(),
            "decay_epoch" => t.decay_epoch.map(|e| e.to_string()).unwrap_or_default(),
            "decay_fraction" => t.decay_fraction.to_string(),
            "decay_factor" => t.optimizer.decay_factor.to_string(),
            "variant" => t.variant.name().to_string(),
            "mu" => t.weights.mu.to_string(),
            "psi" => t.weights.psi.to_string(),
            "lambda" => t.weights.lambda.to_string(),
            "eps_charb" => t.weights.eps_charb.to_string(),
            "input_size" => format_size(t.model.input_size),
            "width_scale" => t.model.width_scale.to_string(),
            "dense_block_layers" => t.model.dense_block_layers.to_string(),
            "use_skips" => t.model.use_skips.to_string(),
            "ablation" => t.ablation.name().to_string(),
            "seed" => t.seed.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "augment" => t.augment.to_string(),
            "depth_bias_init" => t.depth_bias_init.to_string(),
            "defocus_levels" => self.defocus.levels.to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// The effective configuration as a config file that reproduces it.
    /// Non-default values are annotated with their source.
    pub fn to_ini(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (key, _) in KEYS {
            let _ = write!(s, "{key} = {}", self.value_of(key));
            if let Some((_, src)) = self.overrides.iter().find(|(k, _)| k == key) {
                let _ = write!(s, "  # {src:?}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes [`RunConfig::to_ini`] to `<dir>/effective.cfg`.
    pub fn echo_into(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("effective.cfg");
        fs::write(&path, self.to_ini()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossVariant;
    use crate::train::AblationMode;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn precedence_flag_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(
            &file,
            "[train]\nepochs = 10\nseed = 3\nbatch-size = 2\n; comment\n",
        )
        .unwrap();
        let cfg = RunConfig::layered(
            Some(&file),
            env(&[
                ("DFDNET_SEED", "4"),
                ("DFDNET_EPOCHS", "20"),
                ("HOME", "/x"),
            ]),
            &[("epochs".into(), "30".into())],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.optimizer.momentum, 0.9);
    }

    #[test]
    fn unknown_key_and_bad_value_fail() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.set("epoch", "3", Source::Flag),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cfg.set("epochs", "three", Source::Flag),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cfg.set("variant", "l2", Source::Flag),
            Err(Error::UnknownVariant(_))
        ));
        assert!(parse_ini("no equals sign").is_err());
    }

    #[test]
    fn ini_echo_reproduces_config() {
        let mut cfg = RunConfig::default();
        cfg.set("variant", "l1+l1", Source::Flag).unwrap();
        cfg.set("ablation", "depth_only", Source::File).unwrap();
        cfg.set("input_size", "64", Source::Flag).unwrap();
        cfg.set("decay_epoch", "7", Source::Flag).unwrap();
        cfg.set("out", "runs/a", Source::Flag).unwrap();
        let mut again = RunConfig::default();
        for (k, v) in parse_ini(&cfg.to_ini()).unwrap() {
            again.set(&k, &v, Source::File).unwrap();
        }
        assert_eq!(again.train, cfg.train);
        assert_eq!(again.out, cfg.out);
        assert_eq!(again.train.variant, LossVariant::L1L1);
        assert_eq!(again.train.ablation, AblationMode::DepthOnly);
        assert_eq!(again.train.model.input_size, (64, 64));
    }

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for (key, _) in KEYS {
            let mut c = RunConfig::default();
            c.set(key, &cfg.value_of(key), Source::Flag).unwrap();
            assert_eq!(c.train, cfg.train, "{key}");
        }
    }
}
