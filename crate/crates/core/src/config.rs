//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment line, blank lines are
//! ignored. [`resolve`] fills every known key with its default, overlays the
//! user's assignments, and rejects unknown or duplicate keys, so a resolved
//! config is always complete and echoes byte-for-byte reproducibly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};

/// Every key the tools understand: name, default, documentation.
pub const KNOWN_KEYS: &[(&str, &str, &str)] = &[
    ("data_dir", "data", "directory holding the dataset files"),
    ("run_dir", "run", "directory receiving run artifacts"),
    ("seed", "0", "root seed; every random stream derives from it"),
    ("embedding_dim", "64", "embedding width k of all three embedding tables"),
    ("eta", "0.0001", "weight of the degree-weighted loss term"),
    ("kappa", "0.01", "weight of the neighbourhood loss term"),
    ("neighbor_k", "10", "co-occurrence neighbours kept per item"),
    ("attn_softmax", "false", "normalise the two attention weights to sum to 1"),
    ("learning_rate", "0.01", "Adam learning rate for all training stages"),
    ("batch_size", "512", "minibatch size of backbone training"),
    ("neg_ratio", "1", "negatives sampled per positive"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "0.00000001", "Adam denominator offset"),
    ("outer_iters", "3", "outer alternations of identification and mask fitting"),
    ("outer_tol", "0.001", "stop outer loop when the mask moves less than this"),
    ("num_envs", "10", "latent environments assumed by identification"),
    ("epochs_him", "20", "backbone epochs per identification round"),
    ("identify_rounds", "10", "maximum identification rounds per outer iteration"),
    ("iters_mask", "40", "mask update iterations per outer iteration"),
    ("epochs_final", "500", "epochs of the final invariant-content training"),
    ("mask_sigma", "0.1", "initial std of the mask sampling noise"),
    ("mask_lambda", "1", "L2 decay weight on the mask"),
    ("mask_step", "0.1", "step size of mask updates"),
    ("pareto_mode", "adaptive", "adaptive, erm_only, or irm_only"),
    ("eval_k", "10", "ranking depth K of the reported metrics"),
    ("split_ratio", "0.1", "in-distribution fraction held out for IID testing"),
    ("synth_users", "200", "synthetic generator: number of users"),
    ("synth_items", "300", "synthetic generator: number of items"),
    ("synth_d_inv", "4", "synthetic generator: invariant feature dims"),
    ("synth_d_spu", "4", "synthetic generator: spurious feature dims"),
    ("synth_envs", "2", "synthetic generator: number of environments"),
    ("synth_flip", "1", "synthetic generator: sign-flip probability per spurious dim"),
    ("synth_density", "0.05", "synthetic generator: fraction of pairs made positive"),
];

/// An ordered set of `key = value` assignments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    /// Parses config text. Each assignment may appear at most once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected `key = value`, got {raw:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key {key:?}"
                )));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Builds a config from key/value pairs (mostly for tests and tools).
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let entries = pairs
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        ConfigFile { entries }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Renders the assignments, one per line, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.entries {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(value);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let raw = self.required(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: {raw:?} is not a count")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let raw = self.required(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: {raw:?} is not an integer")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let raw = self.required(key)?;
        let value: f64 = raw
            .parse()
            .map_err(|_| Error::Config(format!("key {key:?}: {raw:?} is not a number")))?;
        if !value.is_finite() {
            return Err(Error::Config(format!("key {key:?}: {raw:?} is not finite")));
        }
        Ok(value)
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.required(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!(
                "key {key:?}: expected true or false, got {other:?}"
            ))),
        }
    }

    pub fn get_string(&self, key: &str) -> Result<String> {
        Ok(self.required(key)?.to_string())
    }
}

/// Fills defaults for every known key, overlays the user's assignments, and
/// rejects keys outside the schema. The result always holds exactly the
/// known keys.
pub fn resolve(user: &ConfigFile) -> Result<ConfigFile> {
    for key in user.keys() {
        if !KNOWN_KEYS.iter().any(|(name, _, _)| *name == key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
    }
    let mut resolved = default_config();
    for (key, value) in &user.entries {
        resolved.set(key, value);
    }
    Ok(resolved)
}

/// Every known key at its default.
pub fn default_config() -> ConfigFile {
    ConfigFile::from_pairs(KNOWN_KEYS.iter().map(|&(name, default, _)| (name, default)))
}

/// Reads the synthetic-generator spec out of a resolved config.
pub fn synthetic_spec(resolved: &ConfigFile) -> Result<SyntheticSpec> {
    Ok(SyntheticSpec {
        num_users: resolved.get_usize("synth_users")?,
        num_items: resolved.get_usize("synth_items")?,
        d_inv: resolved.get_usize("synth_d_inv")?,
        d_spu: resolved.get_usize("synth_d_spu")?,
        num_envs_true: resolved.get_usize("synth_envs")?,
        flip_strength: resolved.get_f64("synth_flip")?,
        density: resolved.get_f64("synth_density")?,
        seed: resolved.get_u64("seed")?,
    })
}
