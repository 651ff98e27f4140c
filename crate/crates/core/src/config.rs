//! Flat, strictly parsed configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How frames are chosen for the length branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// `l` frames uniformly over the whole video, with replacement.
    Random,
    /// `l` frames uniformly over `[0, t]`, with replacement.
    CausalRandom,
    /// The first `min(M, t + 1)` frames.
    Firstframe,
    /// The `min(M, t + 1)` frames ending at `t`.
    Consecutive,
}

impl Strategy {
    pub fn is_causal(self) -> bool {
        matches!(self, Strategy::CausalRandom | Strategy::Firstframe | Strategy::Consecutive)
    }
}

/// How the final 3D pose is assembled from the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    /// Sum of length-scaled unit directions along each root path.
    Analytic,
    /// Affine heads regress shifts and joints from `[lengths; directions]`.
    Heads,
}

/// Which estimator is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Bone direction and bone length branches.
    Decomposed,
    /// The direction architecture regressing root-relative joints directly.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    // Synthetic data.
    pub skeleton: String,
    pub actors: usize,
    pub val_actors: usize,
    pub videos_per_actor: usize,
    pub frames_per_video: usize,
    pub length_jitter: f64,
    pub min_sinusoids: usize,
    pub max_sinusoids: usize,
    /// Motion frequency band, cycles per frame.
    pub min_freq: f64,
    pub max_freq: f64,
    /// Keypoint noise standard deviation, normalized image units.
    pub noise_sigma: f64,
    pub occlusion_prob: f64,
    pub occlusion_noise_scale: f64,
    pub cameras: usize,
    pub image_width: f64,
    pub image_height: f64,
    pub data_seed: u64,

    // Direction branch.
    pub d: usize,
    pub s: usize,
    pub channels: usize,
    pub subnets: usize,
    pub vis_fusion: bool,
    pub causal: bool,
    pub dropout: f64,

    // Length branch.
    pub l: usize,
    pub gamma: f64,
    pub length_channels: usize,
    pub length_blocks: usize,
    pub strategy: Strategy,
    #[serde(rename = "M")]
    pub frame_budget: usize,
    pub attention: bool,
    pub augment: bool,

    // Training.
    pub model: ModelKind,
    pub composition: Composition,
    #[serde(rename = "lambda_D")]
    pub lambda_d: f64,
    #[serde(rename = "lambda_L")]
    pub lambda_l: f64,
    #[serde(rename = "lambda_J")]
    pub lambda_j: f64,
    #[serde(rename = "lambda_JS")]
    pub lambda_js: f64,
    pub batch: usize,
    pub aug_batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training frames.
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            skeleton: "h36m17".into(),
            actors: 6,
            val_actors: 2,
            videos_per_actor: 4,
            frames_per_video: 800,
            length_jitter: 0.1,
            min_sinusoids: 2,
            max_sinusoids: 4,
            min_freq: 0.002,
            max_freq: 0.01,
            noise_sigma: 0.005,
            occlusion_prob: 0.1,
            occlusion_noise_scale: 5.0,
            cameras: 4,
            image_width: 1000.0,
            image_height: 1000.0,
            data_seed: 7,

            d: 27,
            s: 3,
            channels: 128,
            subnets: 2,
            vis_fusion: true,
            causal: false,
            dropout: 0.25,

            l: 50,
            gamma: 10.0,
            length_channels: 128,
            length_blocks: 2,
            strategy: Strategy::Random,
            frame_budget: 50,
            attention: true,
            augment: true,

            model: ModelKind::Decomposed,
            composition: Composition::Analytic,
            lambda_d: 0.02,
            lambda_l: 0.05,
            lambda_j: 1.0,
            lambda_js: 0.1,
            batch: 64,
            aug_batch: 32,
            lr: 1e-3,
            lr_decay: 0.95,
            epochs: 3,
            steps_per_epoch: 0,
            seed: 1,
        }
    }
}

impl Config {
    /// Number of stride-`s` blocks `m` with `d = s^m`.
    pub fn levels(&self) -> Result<usize> {
        if self.s < 2 {
            return Err(Error::Config(format!("stride s = {} must be at least 2", self.s)));
        }
        let mut m = 0;
        let mut n = self.d;
        while n > 1 && n % self.s == 0 {
            n /= self.s;
            m += 1;
        }
        if n != 1 || m == 0 {
            return Err(Error::Config(format!("d = {} is not a positive power of s = {}", self.d, self.s)));
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.levels()?;
        if self.subnets == 0 || self.subnets > m {
            return Err(Error::Config(format!("subnets = {} must lie in [1, {m}] for d = {}", self.subnets, self.d)));
        }
        let lambdas = [
            ("lambda_D", self.lambda_d),
            ("lambda_L", self.lambda_l),
            ("lambda_J", self.lambda_j),
            ("lambda_JS", self.lambda_js),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be non-negative")));
            }
        }
        if self.batch < 2 {
            return Err(Error::Config(format!("batch = {} must be at least 2", self.batch)));
        }
        if self.l == 0 || self.frame_budget == 0 {
            return Err(Error::Config("l and M must be at least 1".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma = {} must be non-negative", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        if self.channels == 0 || self.length_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.val_actors >= self.actors {
            return Err(Error::Config("val_actors must leave at least one training actor".into()));
        }
        if self.min_sinusoids == 0 || self.min_sinusoids > self.max_sinusoids {
            return Err(Error::Config("need 1 <= min_sinusoids <= max_sinusoids".into()));
        }
        if !(self.min_freq > 0.0 && self.min_freq <= self.max_freq) {
            return Err(Error::Config("need 0 < min_freq <= max_freq".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("occlusion_prob outside [0, 1]".into()));
        }
        if self.causal && !self.strategy.is_causal() {
            return Err(Error::Config(format!("causal mode cannot use the {:?} length strategy", self.strategy)));
        }
        if self.cameras == 0 {
            return Err(Error::Config("need at least one camera".into()));
        }
        Ok(())
    }

    /// Short digest of the canonical JSON form, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Builds the effective configuration: defaults, then the JSON file (if
/// any), then `key=value` overrides. Values parse as JSON and fall back to
/// plain strings. Unknown or ill-typed keys are rejected by name.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
    let mut obj = serde_json::Map::new();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        if !text.trim().is_empty() {
            match serde_json::from_str::<serde_json::Value>(&text) {
                Ok(serde_json::Value::Object(m)) => obj = m,
                Ok(_) => return Err(Error::Config(format!("{}: top level must be an object", path.display()))),
                Err(e) => return Err(Error::Config(format!("{}: {e}", path.display()))),
            }
        }
    }
    for (key, raw) in overrides {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        obj.insert(key.clone(), value);
    }
    let cfg: Config = serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = write("");
        assert_eq!(load_config(Some(f.path()), &[]).unwrap(), Config::default());
        assert_eq!(load_config(None, &[]).unwrap(), Config::default());
    }

    #[test]
    fn overrides_win() {
        let f = write(r#"{"l": 50, "strategy": "firstframe"}"#);
        let cfg = load_config(Some(f.path()), &[("l".into(), "10".into())]).unwrap();
        assert_eq!(cfg.l, 10);
        assert_eq!(cfg.strategy, Strategy::Firstframe);
    }

    #[test]
    fn unknown_key_named() {
        let f = write(r#"{"lamda_D": 0.1}"#);
        let err = load_config(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(err.contains("lamda_D"), "{err}");
        let err = load_config(None, &[("gamma".into(), "\"hot\"".into())]).unwrap_err().to_string();
        assert!(err.contains("gamma") || err.contains("hot"), "{err}");
    }

    #[test]
    fn lambda_keys_keep_their_case() {
        let json = serde_json::to_value(Config::default()).unwrap();
        assert_eq!(json["lambda_D"], 0.02);
        assert_eq!(json["lambda_JS"], 0.1);
        assert_eq!(json["M"], 50);
    }

    #[test]
    fn pyramid_consistency() {
        let mut cfg = Config::default();
        assert_eq!(cfg.levels().unwrap(), 3);
        cfg.d = 10;
        assert!(cfg.validate().is_err());
        cfg.d = 9;
        cfg.subnets = 3;
        assert!(cfg.validate().is_err());
        cfg.subnets = 2;
        cfg.validate().unwrap();
    }
}
