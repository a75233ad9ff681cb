//! Plain-text `key=value` configuration for fitting runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::clustering::DEFAULT_CLUSTERS;
use crate::error::{Error, Result};
use crate::optimizer::{LossConfig, Schedule};
use crate::rigidity::DEFAULT_EMBEDDING_DIM;

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
/// Returns `(line number, key, value)`.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(k + 1, format!("expected key=value, got {line:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::parse(k + 1, "empty key"));
        }
        out.push((k + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub embedding_dim: usize,
    /// Seeds parameter initialization and clustering.
    pub seed: u64,
    /// Cluster count before pruning.
    pub clusters: usize,
    /// Fit with one global pose per frame pair.
    pub static_mode: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            loss: LossConfig::default(),
            schedule: Schedule::default(),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            seed: 0,
            clusters: DEFAULT_CLUSTERS,
            static_mode: false,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl FitConfig {
    pub const KEYS: [&'static str; 17] = [
        "lr",
        "iterations",
        "beta1",
        "beta2",
        "epsilon",
        "lr_final_ratio",
        "freeze_embeddings",
        "embedding_warmup",
        "embedding_lr_scale",
        "lambda_depth",
        "robust_delta",
        "use_static_override",
        "sampson_threshold",
        "embedding_dim",
        "seed",
        "clusters",
        "static_mode",
    ];

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.schedule;
        let l = &self.loss;
        let values = [
            s.lr.to_string(),
            s.iterations.to_string(),
            s.beta1.to_string(),
            s.beta2.to_string(),
            s.epsilon.to_string(),
            s.lr_final_ratio.to_string(),
            s.freeze_embeddings.to_string(),
            s.embedding_warmup.to_string(),
            s.embedding_lr_scale.to_string(),
            l.lambda_depth.to_string(),
            l.robust_delta.to_string(),
            l.use_static_override.to_string(),
            l.sampson_threshold.to_string(),
            self.embedding_dim.to_string(),
            self.seed.to_string(),
            self.clusters.to_string(),
            self.static_mode.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Validation(format!("{key}: `{value}`: {e}"));
        let int = || value.parse::<usize>().map_err(|e| bad(&e));
        let float = || value.parse::<f64>().map_err(|e| bad(&e));
        let flag = || parse_bool(value).ok_or_else(|| bad(&"expected true or false"));
        let (s, l) = (&mut self.schedule, &mut self.loss);
        match key {
            "lr" => s.lr = float()?,
            "iterations" => s.iterations = int()?,
            "beta1" => s.beta1 = float()?,
            "beta2" => s.beta2 = float()?,
            "epsilon" => s.epsilon = float()?,
            "lr_final_ratio" => s.lr_final_ratio = float()?,
            "freeze_embeddings" => s.freeze_embeddings = flag()?,
            "embedding_warmup" => s.embedding_warmup = int()?,
            "embedding_lr_scale" => s.embedding_lr_scale = float()?,
            "lambda_depth" => l.lambda_depth = float()?,
            "robust_delta" => l.robust_delta = float()?,
            "use_static_override" => l.use_static_override = flag()?,
            "sampson_threshold" => l.sampson_threshold = float()?,
            "embedding_dim" => self.embedding_dim = int()?,
            "seed" => self.seed = value.parse::<u64>().map_err(|e| bad(&e))?,
            "clusters" => self.clusters = int()?,
            "static_mode" => self.static_mode = flag()?,
            _ => return Err(Error::Validation(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be >= 1".into()));
        }
        if self.clusters == 0 {
            return Err(Error::Validation("clusters must be >= 1".into()));
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FitConfig::default();
        for (line, k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)
                .map_err(|e| Error::parse(line, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut c = FitConfig::default();
        c.set("lr", "0.003").unwrap();
        c.set("static_mode", "true").unwrap();
        c.set("robust_delta", "inf").unwrap();
        c.set("seed", "42").unwrap();
        let back = FitConfig::parse(&c.to_config_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.loss.robust_delta, f64::INFINITY);
    }

    #[test]
    fn comments_and_errors() {
        let c = FitConfig::parse("# run\n\niterations = 12  # short\n").unwrap();
        assert_eq!(c.schedule.iterations, 12);
        let e = FitConfig::parse("lr=0.1\nbogus=1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(FitConfig::parse("lr 0.1").is_err());
        assert!(FitConfig::parse("static_mode=maybe").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let c = FitConfig::default();
        let mut d = FitConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert_eq!(c.entries().len(), FitConfig::KEYS.len());
    }

    #[test]
    fn validation() {
        assert!(FitConfig::default().validate().is_ok());
        assert!(FitConfig::parse("clusters=0").unwrap().validate().is_err());
        assert!(FitConfig::parse("lambda_depth=-1")
            .unwrap()
            .validate()
            .is_err());
    }
}
