//! Run configuration: a `key = value` file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use dlpr_core::config::KeyValues;
use dlpr_core::optics::{NoiseSpec, PropagationConfig};
use dlpr_core::{Error, Result};

const OPTICS_KEYS: [&str; 5] = ["wavelength", "pixel_pitch", "distance", "grid", "pad_factor"];
const NOISE_KEYS: [&str; 3] = ["sigma", "quantize", "seed"];
const DATASET_KEYS: [&str; 8] = ["path", "source", "kind", "count", "split", "seed", "margin", "tag"];
const TRAIN_KEYS: [&str; 9] =
    ["epochs", "batch_size", "learning_rate", "beta1", "beta2", "epsilon", "seed", "eval_every", "precision"];
const EXPERIMENT_KEYS: [&str; 11] = [
    "input", "checkpoint", "data", "axis", "values", "layer", "filters", "steps", "step_size", "seed", "count",
];

/// Merged settings. Flags are applied on top of the file with [`RunConfig::set`].
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    kv: KeyValues,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let kv = match path {
            Some(p) => KeyValues::load(p).map_err(as_input)?,
            None => KeyValues::new(),
        };
        for (key, _) in kv.iter() {
            check_key(key)?;
        }
        Ok(Self { kv })
    }

    /// Override `key` when the flag was given.
    pub fn set<V: ToString>(&mut self, key: &str, value: Option<V>) {
        if let Some(v) = value {
            self.kv.set(key, v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.kv.get(key)
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.kv.get_parsed(key)
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.kv.get_or(key, default)
    }

    pub fn section(&self, prefix: &str) -> KeyValues {
        self.kv.section(prefix)
    }

    pub fn optics(&self) -> Result<PropagationConfig> {
        PropagationConfig::from_kv(&self.kv.section("optics"))
    }

    pub fn noise(&self) -> Result<NoiseSpec> {
        let s = self.kv.section("noise");
        let noise = NoiseSpec {
            sigma: s.get_or("sigma", 0.0)?,
            quantize: s.get_or("quantize", false)?,
            seed: s.get_or("seed", 0)?,
        };
        if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise.sigma must be finite and >= 0, got {}", noise.sigma)));
        }
        Ok(noise)
    }

    /// Output location: `--out` or the `out` key, else `$DLPR_OUT/<fallback>`.
    pub fn output(&self, fallback: &str) -> Result<PathBuf> {
        if let Some(p) = self.kv.get("out") {
            return Ok(PathBuf::from(p));
        }
        match std::env::var_os("DLPR_OUT") {
            Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(fallback)),
            _ => Err(Error::InvalidArgument("no output location: pass --out or set DLPR_OUT".into())),
        }
    }

    /// Effective settings: everything given, overlaid with the resolved values.
    pub fn resolved(&self, resolved: &KeyValues) -> KeyValues {
        let mut all = self.kv.clone();
        all.merge(resolved);
        all
    }
}

fn check_key(key: &str) -> Result<()> {
    let known = match key.split_once('.') {
        None => matches!(key, "out" | "threads"),
        Some(("optics", k)) => OPTICS_KEYS.contains(&k),
        Some(("noise", k)) => NOISE_KEYS.contains(&k),
        Some(("dataset", k)) => DATASET_KEYS.contains(&k),
        Some(("train", k)) => TRAIN_KEYS.contains(&k),
        Some(("experiment", k)) => EXPERIMENT_KEYS.contains(&k),
        // network keys are checked by the spec parser
        Some(("network", _)) => true,
        Some(_) => false,
    };
    if known {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("unknown config key {key:?}")))
    }
}

/// Failing to read an input is a usage problem, not an output failure.
pub fn as_input(e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::InvalidArgument(format!("cannot read {}: {source}", path.display())),
        other => other,
    }
}
