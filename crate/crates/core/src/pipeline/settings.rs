//! `key = value` configuration files with command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::extract::{ExtractConfig, SampleConfig};
use super::synth::SynthConfig;
use crate::gmm::EmConfig;
use crate::mlp::TrainConfig;
use crate::predict::SvmConfig;
use crate::runlength::RlNormalization;
use crate::{Error, Result};

/// Every key the configuration understands.
pub const KNOWN_KEYS: &[&str] = &[
    "rl.bins",
    "rl.levels",
    "rl.max_pixels",
    "rl.threshold",
    "rl.normalization",
    "fv.max_pixels",
    "fv.renormalize_grid",
    "dense.scales",
    "dense.stride",
    "dense.min_energy",
    "dense.smoothing_magnif",
    "dense.min_contrast",
    "hybrid.layer",
    "sample.per_image",
    "sample.seed",
    "pca.dim",
    "gmm.components",
    "gmm.max_iters",
    "gmm.rel_tol",
    "gmm.variance_floor",
    "gmm.kmeans_iters",
    "gmm.seed",
    "mlp.hidden_width",
    "mlp.hidden_layers",
    "mlp.dropout",
    "mlp.learning_rate",
    "mlp.momentum",
    "mlp.batch_size",
    "mlp.epochs",
    "mlp.lr_decay",
    "mlp.lr_step",
    "mlp.seed",
    "svm.lambda",
    "svm.epochs",
    "svm.seed",
    "eval.seed",
    "eval.repeats",
    "synth.classes",
    "synth.per_class",
    "synth.seed",
    "synth.salt_pepper",
    "synth.max_shift",
    "synth.thickness_jitter",
    "synth.distractors",
    "synth.element_jitter",
];

/// Flat string settings. Lines are `key = value`; `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            s.set_pair(line).map_err(|_| Error::Usage(format!("config line {}: expected key = value", n + 1)))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got {pair:?}")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Usage(format!("empty key in {pair:?}")));
        }
        self.values.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Usage(format!("bad value {v:?} for {key}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::Usage(format!("bad list {v:?} for {key}"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Fails on the first key not in [`KNOWN_KEYS`].
    pub fn check_known(&self) -> Result<()> {
        match self.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            Some(k) => Err(Error::Usage(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn extract_config(&self) -> Result<ExtractConfig> {
        let mut c = ExtractConfig::default();
        c.rl.bins = self.get_or("rl.bins", c.rl.bins)?;
        if let Some(l) = self.get_list("rl.levels")? {
            c.rl.levels = l;
        }
        c.rl.max_pixels = self.get_or("rl.max_pixels", c.rl.max_pixels)?;
        c.rl.threshold = self.get_or("rl.threshold", c.rl.threshold)?;
        c.rl.normalization = match self.get_str("rl.normalization") {
            None | Some("per-cell") => RlNormalization::PerCell,
            Some("global") => RlNormalization::Global,
            Some(v) => return Err(Error::Usage(format!("rl.normalization must be per-cell or global, got {v:?}"))),
        };
        c.fv.max_pixels = self.get_or("fv.max_pixels", c.fv.max_pixels)?;
        c.fv.renormalize_grid = self.get_or("fv.renormalize_grid", c.fv.renormalize_grid)?;
        if let Some(s) = self.get_list("dense.scales")? {
            c.fv.dense.scales = s;
        }
        c.fv.dense.stride = self.get_or("dense.stride", c.fv.dense.stride)?;
        c.fv.dense.min_energy = self.get_or("dense.min_energy", c.fv.dense.min_energy)?;
        c.fv.dense.smoothing_magnif = self.get_or("dense.smoothing_magnif", c.fv.dense.smoothing_magnif)?;
        c.fv.dense.min_contrast = self.get_or("dense.min_contrast", c.fv.dense.min_contrast)?;
        c.hybrid_layer = self.get_or("hybrid.layer", c.hybrid_layer)?;
        Ok(c)
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        let d = SampleConfig::default();
        Ok(SampleConfig {
            per_image: self.get_or("sample.per_image", d.per_image)?,
            seed: self.get_or("sample.seed", d.seed)?,
        })
    }

    pub fn em_config(&self) -> Result<EmConfig> {
        let d = EmConfig::default();
        Ok(EmConfig {
            max_iters: self.get_or("gmm.max_iters", d.max_iters)?,
            rel_tol: self.get_or("gmm.rel_tol", d.rel_tol)?,
            variance_floor: self.get_or("gmm.variance_floor", d.variance_floor)?,
            kmeans_iters: self.get_or("gmm.kmeans_iters", d.kmeans_iters)?,
            seed: self.get_or("gmm.seed", d.seed)?,
        })
    }

    pub fn mlp_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            hidden_width: self.get_or("mlp.hidden_width", d.hidden_width)?,
            hidden_layers: self.get_or("mlp.hidden_layers", d.hidden_layers)?,
            dropout: self.get_or("mlp.dropout", d.dropout)?,
            learning_rate: self.get_or("mlp.learning_rate", d.learning_rate)?,
            momentum: self.get_or("mlp.momentum", d.momentum)?,
            batch_size: self.get_or("mlp.batch_size", d.batch_size)?,
            epochs: self.get_or("mlp.epochs", d.epochs)?,
            lr_decay: self.get_or("mlp.lr_decay", d.lr_decay)?,
            lr_step: self.get_or("mlp.lr_step", d.lr_step)?,
            seed: self.get_or("mlp.seed", d.seed)?,
        })
    }

    pub fn svm_config(&self) -> Result<SvmConfig> {
        let d = SvmConfig::default();
        Ok(SvmConfig {
            lambda: self.get_or("svm.lambda", d.lambda)?,
            epochs: self.get_or("svm.epochs", d.epochs)?,
            seed: self.get_or("svm.seed", d.seed)?,
        })
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let mut c = SynthConfig::default();
        c.classes = self.get_or("synth.classes", c.classes)?;
        c.per_class = self.get_or("synth.per_class", c.per_class)?;
        c.seed = self.get_or("synth.seed", c.seed)?;
        c.noise.salt_pepper = self.get_or("synth.salt_pepper", c.noise.salt_pepper)?;
        c.noise.max_shift = self.get_or("synth.max_shift", c.noise.max_shift)?;
        c.noise.thickness_jitter = self.get_or("synth.thickness_jitter", c.noise.thickness_jitter)?;
        c.noise.distractors = self.get_or("synth.distractors", c.noise.distractors)?;
        c.noise.element_jitter = self.get_or("synth.element_jitter", c.noise.element_jitter)?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_and_read() {
        let mut s = Settings::parse("# comment\nrl.bins = 9\n\ndense.scales=24, 48 # trailing\n").unwrap();
        assert_eq!(s.get::<usize>("rl.bins").unwrap(), Some(9));
        assert_eq!(s.get_list::<usize>("dense.scales").unwrap(), Some(vec![24, 48]));
        s.set_pair("rl.bins=7").unwrap();
        assert_eq!(s.get_or("rl.bins", 11usize).unwrap(), 7);
        assert_eq!(s.get_or("missing", 3usize).unwrap(), 3);
        assert!(matches!(s.get::<f64>("dense.scales"), Err(Error::Usage(_))));
        assert!(Settings::parse("novalue\n").is_err());
    }

    #[test]
    fn typed_configs_follow_keys() {
        let s = Settings::parse("rl.levels = 1,2\nrl.normalization = global\nmlp.epochs = 5\nsynth.classes = 3\n").unwrap();
        s.check_known().unwrap();
        let e = s.extract_config().unwrap();
        assert_eq!(e.rl.levels, vec![1, 2]);
        assert_eq!(e.rl.normalization, RlNormalization::Global);
        assert_eq!(e.rl.bins, 11);
        assert_eq!(s.mlp_config().unwrap().epochs, 5);
        assert_eq!(s.synth_config().unwrap().classes, 3);
        assert_eq!(Settings::default().extract_config().unwrap(), ExtractConfig::default());
        let bad = Settings::parse("rl.binz = 3\n").unwrap();
        assert!(matches!(bad.check_known(), Err(Error::Usage(_))));
        let bad = Settings::parse("rl.normalization = sideways\n").unwrap();
        assert!(bad.extract_config().is_err());
    }
}
