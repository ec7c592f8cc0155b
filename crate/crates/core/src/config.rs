//! Plain-text `key = value` configuration covering every stage.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Lists are comma separated. Every key and its default is
//! listed by [`PipelineConfig::to_text`] on the default config.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::contour::{CueParams, SpectralParams, DEFAULT_MIN_AREA};
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::nn::{TrainConfig, WNetConfig};
use crate::synth::SynthParams;

/// How the configured dropout value is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutReading {
    /// The value is the probability of zeroing a unit.
    Drop,
    /// The value is the probability of keeping a unit.
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub wnet: WNetConfig,
    /// Dropout value as written in the config, before `dropout_reading`.
    pub dropout: f64,
    pub dropout_reading: DropoutReading,
    pub train: TrainConfig,
    pub crf: CrfParams,
    pub cues: CueParams,
    pub spectral: SpectralParams,
    pub min_area: usize,
    pub eval_step: f64,
    /// Thresholds at which `segment` writes segmentations; empty writes
    /// only the hierarchy.
    pub segment_thresholds: Vec<f64>,
    pub synth: SynthParams,
    pub synth_count: usize,
    pub run_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let wnet = WNetConfig::default();
        Self {
            dropout: wnet.dropout_p,
            dropout_reading: DropoutReading::Drop,
            wnet,
            train: TrainConfig::default(),
            crf: CrfParams::default(),
            cues: CueParams::default(),
            spectral: SpectralParams::default(),
            min_area: DEFAULT_MIN_AREA,
            eval_step: 0.05,
            segment_thresholds: vec![0.5],
            synth: SynthParams::default(),
            synth_count: 20,
            run_dir: PathBuf::from("run"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.train.seed = parse(key, v)?,
            "wnet.input_size" => self.wnet.input_size = parse(key, v)?,
            "wnet.channels" => self.wnet.channels = parse(key, v)?,
            "wnet.k" => self.wnet.k = parse(key, v)?,
            "wnet.depth" => self.wnet.depth = parse(key, v)?,
            "wnet.base_channels" => self.wnet.base_channels = parse(key, v)?,
            "wnet.separable" => self.wnet.separable = parse_bool(key, v)?,
            "wnet.batch_norm" => self.wnet.batch_norm = parse_bool(key, v)?,
            "wnet.dropout" => self.dropout = parse(key, v)?,
            "wnet.dropout_reading" => {
                self.dropout_reading = match v {
                    "drop" => DropoutReading::Drop,
                    "keep" => DropoutReading::Keep,
                    _ => return Err(Error::Config(format!("{key}: expected drop or keep"))),
                }
            }
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr_initial = parse(key, v)?,
            "train.lr_decay_every" => self.train.lr_decay_every = parse(key, v)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = parse(key, v)?,
            "train.iterations" => self.train.max_iters = parse(key, v)?,
            "train.ncut" => self.train.ncut_step = parse_bool(key, v)?,
            "affinity.sigma_i" => self.train.affinity.sigma_i = parse(key, v)?,
            "affinity.sigma_x" => self.train.affinity.sigma_x = parse(key, v)?,
            "affinity.radius" => self.train.affinity.radius = parse(key, v)?,
            "crf.iterations" => self.crf.iterations = parse(key, v)?,
            "crf.w_app" => self.crf.w_app = parse(key, v)?,
            "crf.w_smooth" => self.crf.w_smooth = parse(key, v)?,
            "crf.theta_alpha" => self.crf.theta_alpha = parse(key, v)?,
            "crf.theta_beta" => self.crf.theta_beta = parse(key, v)?,
            "crf.theta_gamma" => self.crf.theta_gamma = parse(key, v)?,
            "crf.max_pixels" => self.crf.max_pixels = parse(key, v)?,
            "cues.scales" => self.cues.scales = parse_list(key, v)?,
            "cues.orientations" => self.cues.orientations = parse(key, v)?,
            "cues.bins" => self.cues.bins = parse(key, v)?,
            "cues.beta" => {
                self.cues.beta = if v == "uniform" { None } else { Some(parse_list(key, v)?) }
            }
            "cues.gamma" => self.cues.gamma = parse(key, v)?,
            "cues.texture" => self.cues.use_texture = parse_bool(key, v)?,
            "cues.spb" => self.cues.use_spb = parse_bool(key, v)?,
            "cues.logistic_a" => self.cues.logistic_a = parse(key, v)?,
            "cues.logistic_b" => self.cues.logistic_b = parse(key, v)?,
            "spectral.vectors" => self.spectral.vectors = parse(key, v)?,
            "spectral.tolerance" => self.spectral.tolerance = parse(key, v)?,
            "spectral.max_iterations" => self.spectral.max_iterations = parse(key, v)?,
            "spectral.radius" => self.spectral.radius = parse(key, v)?,
            "spectral.rho" => self.spectral.rho = parse(key, v)?,
            "spectral.max_side" => self.spectral.max_side = parse(key, v)?,
            "regions.min_area" => self.min_area = parse(key, v)?,
            "eval.step" => self.eval_step = parse(key, v)?,
            "segment.thresholds" => self.segment_thresholds = parse_list(key, v)?,
            "synth.count" => self.synth_count = parse(key, v)?,
            "synth.size" => self.synth.size = parse(key, v)?,
            "synth.min_regions" => self.synth.min_regions = parse(key, v)?,
            "synth.max_regions" => self.synth.max_regions = parse(key, v)?,
            "synth.noise" => self.synth.noise_sigma = parse(key, v)?,
            "synth.gradient" => self.synth.gradient = parse(key, v)?,
            "paths.run_dir" => self.run_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Resolves derived values and validates every section.
    pub fn finish(&mut self) -> Result<()> {
        self.wnet.dropout_p = match self.dropout_reading {
            DropoutReading::Drop => self.dropout,
            DropoutReading::Keep => 1.0 - self.dropout,
        };
        if !(0.0..1.0).contains(&self.wnet.dropout_p) {
            return Err(Error::Config(format!("dropout {} out of range", self.dropout)));
        }
        self.wnet.validate()?;
        self.train.validate()?;
        self.crf.validate()?;
        self.cues.validate()?;
        self.synth.validate()?;
        crate::metrics::threshold_grid(self.eval_step)?;
        if self.segment_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("segment thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let w = &self.wnet;
        let t = &self.train;
        let c = &self.crf;
        let q = &self.cues;
        let s = &self.spectral;
        let y = &self.synth;
        let reading = match self.dropout_reading {
            DropoutReading::Drop => "drop",
            DropoutReading::Keep => "keep",
        };
        let beta = q.beta.as_deref().map_or("uniform".to_string(), join);
        let lines: Vec<(&str, String)> = vec![
            ("seed", t.seed.to_string()),
            ("wnet.input_size", w.input_size.to_string()),
            ("wnet.channels", w.channels.to_string()),
            ("wnet.k", w.k.to_string()),
            ("wnet.depth", w.depth.to_string()),
            ("wnet.base_channels", w.base_channels.to_string()),
            ("wnet.separable", w.separable.to_string()),
            ("wnet.batch_norm", w.batch_norm.to_string()),
            ("wnet.dropout", self.dropout.to_string()),
            ("wnet.dropout_reading", reading.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr_initial.to_string()),
            ("train.lr_decay_every", t.lr_decay_every.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.iterations", t.max_iters.to_string()),
            ("train.ncut", t.ncut_step.to_string()),
            ("affinity.sigma_i", t.affinity.sigma_i.to_string()),
            ("affinity.sigma_x", t.affinity.sigma_x.to_string()),
            ("affinity.radius", t.affinity.radius.to_string()),
            ("crf.iterations", c.iterations.to_string()),
            ("crf.w_app", c.w_app.to_string()),
            ("crf.w_smooth", c.w_smooth.to_string()),
            ("crf.theta_alpha", c.theta_alpha.to_string()),
            ("crf.theta_beta", c.theta_beta.to_string()),
            ("crf.theta_gamma", c.theta_gamma.to_string()),
            ("crf.max_pixels", c.max_pixels.to_string()),
            ("cues.scales", join(&q.scales)),
            ("cues.orientations", q.orientations.to_string()),
            ("cues.bins", q.bins.to_string()),
            ("cues.beta", beta),
            ("cues.gamma", q.gamma.to_string()),
            ("cues.texture", q.use_texture.to_string()),
            ("cues.spb", q.use_spb.to_string()),
            ("cues.logistic_a", q.logistic_a.to_string()),
            ("cues.logistic_b", q.logistic_b.to_string()),
            ("spectral.vectors", s.vectors.to_string()),
            ("spectral.tolerance", s.tolerance.to_string()),
            ("spectral.max_iterations", s.max_iterations.to_string()),
            ("spectral.radius", s.radius.to_string()),
            ("spectral.rho", s.rho.to_string()),
            ("spectral.max_side", s.max_side.to_string()),
            ("regions.min_area", self.min_area.to_string()),
            ("eval.step", self.eval_step.to_string()),
            ("segment.thresholds", join(&self.segment_thresholds)),
            ("synth.count", self.synth_count.to_string()),
            ("synth.size", y.size.to_string()),
            ("synth.min_regions", y.min_regions.to_string()),
            ("synth.max_regions", y.max_regions.to_string()),
            ("synth.noise", y.noise_sigma.to_string()),
            ("synth.gradient", y.gradient.to_string()),
            ("paths.run_dir", self.run_dir.display().to_string()),
        ];
        lines
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of [`Self::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_round_trips() {
        let d = PipelineConfig::default();
        let back = PipelineConfig::parse_str(&d.to_text()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.hash(), d.hash());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::parse_str("wnet.kk = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn comments_and_overrides() {
        let c = PipelineConfig::parse_str("# desk run\n\nseed = 7\ncues.scales = 1, 3\n").unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.cues.scales, vec![1.0, 3.0]);
        assert_ne!(c.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn keep_reading_inverts() {
        let c = PipelineConfig::parse_str("wnet.dropout = 0.65\nwnet.dropout_reading = keep\n").unwrap();
        assert!((c.wnet.dropout_p - 0.35).abs() < 1e-12);
        let d = PipelineConfig::default();
        assert_eq!(d.wnet.dropout_p, 0.65);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(PipelineConfig::parse_str("train.lr = fast\n").is_err());
        assert!(PipelineConfig::parse_str("wnet.separable = maybe\n").is_err());
        assert!(PipelineConfig::parse_str("no equals sign\n").is_err());
        assert!(PipelineConfig::parse_str("wnet.input_size = 60\n").is_err());
    }
}
