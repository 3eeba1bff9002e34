//! Flat `key = value` run configuration with `signal.`, `pipeline.`, `model.`
//! and `train.` sections.
//!
//! Blank lines and lines starting with `#` are ignored. `model.preset` is
//! applied before any other model key regardless of its position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::echo::PipelineConfig;
use crate::model::{FusionStrategy, ModelConfig};
use crate::signal::ProbeSignalConfig;

use super::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingMode {
    /// All three heads, `L_f + α (L_v + L_a)`.
    Joint,
    SeparateVision,
    SeparateAcoustic,
}

impl TrainingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::SeparateVision => "separate_vision",
            Self::SeparateAcoustic => "separate_acoustic",
        }
    }
}

impl FromStr for TrainingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "joint" => Ok(Self::Joint),
            "separate_vision" => Ok(Self::SeparateVision),
            "separate_acoustic" => Ok(Self::SeparateAcoustic),
            other => Err(format!("unknown training mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitMode {
    /// Label-stratified random split.
    Random,
    /// The listed devices form the test split; the rest is split randomly into train/validation.
    CrossDevice { test_devices: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Train, validation and test fractions. In cross-device mode only the first
    /// two are used, renormalized.
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::Random,
            ratios: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub mode: TrainingMode,
    pub seed: u64,
    pub split: SplitConfig,
    /// Decision threshold on sigmoid scores for HTER and ACC.
    pub threshold: ThresholdMode,
}

/// How the HTER/ACC operating point is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    /// Each head uses the score threshold at its equal-error point on the validation split.
    ValidationEer,
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Fixed(0.5)
    }
}

impl FromStr for ThresholdMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "val_eer" => Ok(ThresholdMode::ValidationEer),
            v => v
                .parse()
                .map(ThresholdMode::Fixed)
                .map_err(|_| format!("threshold `{v}` is neither a number nor `val_eer`")),
        }
    }
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdMode::Fixed(t) => write!(f, "{t}"),
            ThresholdMode::ValidationEer => f.write_str("val_eer"),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-4,
            weight_decay: 1e-5,
            alpha: 0.5,
            mode: TrainingMode::Joint,
            seed: 0,
            split: SplitConfig::default(),
            threshold: ThresholdMode::default(),
        }
    }
}

impl TrainConfig {
    /// Short schedule for single-core runs.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 3e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay non-negative".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!(
                "alpha {} must be a finite non-negative number",
                self.alpha
            ));
        }
        let r = self.split.ratios;
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x))
            || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split ratios {r:?} must lie in [0, 1] and sum to 1"
            ));
        }
        if let SplitMode::CrossDevice { test_devices } = &self.split.mode {
            if test_devices.is_empty() {
                return bad("cross-device split needs at least one test device".into());
            }
        }
        if let ThresholdMode::Fixed(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("threshold {t} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Everything a run needs: probe layout, extraction parameters, architecture and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub signal: ProbeSignalConfig,
    pub highpass_cutoff: f64,
    pub echo_peak_ratio: f64,
    pub min_match: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            signal: ProbeSignalConfig::default(),
            highpass_cutoff: 10_000.0,
            echo_peak_ratio: 0.25,
            min_match: 0.3,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let mut p = PipelineConfig::from_probe(&self.signal)?;
        p.highpass_cutoff = self.highpass_cutoff;
        p.echo_peak_ratio = self.echo_peak_ratio;
        p.min_match = self.min_match;
        p.validate()?;
        Ok(p)
    }

    /// Image side length fed to the vision branch.
    pub fn image_size(&self) -> usize {
        self.model.vision.input_shape[1]
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let p = self.pipeline()?;
        let [c, h, w] = self.model.acoustic.input_shape;
        if [c, h, w] != [1, p.n_freq(), p.n_frames()] {
            return Err(HarnessError::Config(format!(
                "acoustic input {:?} does not match the {}x{} spectrogram",
                self.model.acoustic.input_shape,
                p.n_freq(),
                p.n_frames()
            )));
        }
        let [c, h, w] = self.model.vision.input_shape;
        if c != 3 || h != w {
            return Err(HarnessError::Config(format!(
                "vision input {:?} must be a square RGB image",
                self.model.vision.input_shape
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if entries.insert(k.clone(), v).is_some() {
                return Err(HarnessError::Config(format!(
                    "line {}: duplicate key `{k}`",
                    n + 1
                )));
            }
        }
        let mut cfg = Self::desk();
        if let Some(p) = entries.remove("model.preset") {
            cfg.model = match p.as_str() {
                "desk" => ModelConfig::desk(),
                "paper" => ModelConfig::default(),
                "tiny" => ModelConfig::tiny(),
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown model preset `{other}`"
                    )))
                }
            };
        }
        if let Some(p) = entries.remove("train.preset") {
            cfg.train = match p.as_str() {
                "desk" => TrainConfig::desk(),
                "paper" => TrainConfig::default(),
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown train preset `{other}`"
                    )))
                }
            };
        }
        for (k, v) in &entries {
            cfg.apply(k, v)
                .map_err(|e| HarnessError::Config(format!("`{k} = {v}`: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',').map(|x| num(x.trim())).collect()
        }
        fn triple(v: &str) -> std::result::Result<[usize; 3], String> {
            list::<usize>(v)?
                .try_into()
                .map_err(|_| "expected three comma-separated values".to_string())
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "signal.sample_rate" => self.signal.sample_rate = num(v)?,
            "signal.chirp_samples" => {
                let n = num(v)?;
                self.signal
                    .chirp_specs
                    .iter_mut()
                    .for_each(|c| c.duration_samples = n);
            }
            "signal.chirp_amplitude" => {
                let a = num(v)?;
                self.signal
                    .chirp_specs
                    .iter_mut()
                    .for_each(|c| c.amplitude = a);
            }
            "signal.pilot_freq" => self.signal.pilot_freq = num(v)?,
            "signal.pilot_samples" => self.signal.pilot_duration_samples = num(v)?,
            "signal.pilot_amplitude" => self.signal.pilot_amplitude = num(v)?,
            "signal.gap_pilot_to_first_chirp" => self.signal.gap_pilot_to_first_chirp = num(v)?,
            "signal.gap_between_chirps" => self.signal.gap_between_chirps = num(v)?,
            "signal.tail_samples" => self.signal.tail_samples = num(v)?,
            "signal.window" => self.signal.window = v.parse()?,
            "pipeline.highpass_cutoff" => self.highpass_cutoff = num(v)?,
            "pipeline.echo_peak_ratio" => self.echo_peak_ratio = num(v)?,
            "pipeline.min_match" => self.min_match = num(v)?,
            "model.image_size" => {
                let s = num(v)?;
                m.vision.input_shape = [3, s, s];
            }
            "model.block_layers" => {
                let b = triple(v)?;
                m.vision.block_layers = b;
                m.acoustic.block_layers = b;
            }
            "model.vision_widths" => m.vision.widths = triple(v)?,
            "model.acoustic_widths" => m.acoustic.widths = triple(v)?,
            "model.hcam_channels" => m.hcam_channels = num(v)?,
            "model.key_dim" => m.key_dim = num(v)?,
            "model.hcam_levels" => m.hcam_levels = list(v)?,
            "model.hcam_grids" => {
                let g = list::<usize>(v)?;
                if g.len() != 6 {
                    return Err("expected six values h1,w1,h2,w2,h3,w3".into());
                }
                m.hcam_grids = [(g[0], g[1]), (g[2], g[3]), (g[4], g[5])];
            }
            "model.fusion" => m.fusion = v.parse::<FusionStrategy>()?,
            "model.bn_momentum" => m.bn_momentum = num(v)?,
            "model.bn_eps" => m.bn_eps = num(v)?,
            "model.init_seed" => m.init_seed = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.lr" => t.lr = num(v)?,
            "train.weight_decay" => t.weight_decay = num(v)?,
            "train.alpha" => t.alpha = num(v)?,
            "train.mode" => t.mode = v.parse()?,
            "train.seed" => t.seed = num(v)?,
            "train.hter_threshold" => t.threshold = v.parse()?,
            "train.split" => {
                t.split.mode = match v {
                    "random" => SplitMode::Random,
                    "cross_device" => match &t.split.mode {
                        SplitMode::CrossDevice { .. } => t.split.mode.clone(),
                        SplitMode::Random => SplitMode::CrossDevice {
                            test_devices: vec![],
                        },
                    },
                    other => return Err(format!("unknown split mode `{other}`")),
                }
            }
            "train.test_devices" => {
                let d = list(v)?;
                t.split.mode = SplitMode::CrossDevice { test_devices: d };
            }
            "train.split_ratios" => {
                t.split.ratios = list::<f64>(v)?
                    .try_into()
                    .map_err(|_| "expected three comma-separated values".to_string())?;
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        fn join<T: ToString>(xs: &[T]) -> String {
            xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        let s = &self.signal;
        let m = &self.model;
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("signal.sample_rate", s.sample_rate.to_string());
        kv("signal.chirp_samples", s.longest_chirp().to_string());
        kv(
            "signal.chirp_amplitude",
            s.chirp_specs[0].amplitude.to_string(),
        );
        kv("signal.pilot_freq", s.pilot_freq.to_string());
        kv("signal.pilot_samples", s.pilot_duration_samples.to_string());
        kv("signal.pilot_amplitude", s.pilot_amplitude.to_string());
        kv(
            "signal.gap_pilot_to_first_chirp",
            s.gap_pilot_to_first_chirp.to_string(),
        );
        kv(
            "signal.gap_between_chirps",
            s.gap_between_chirps.to_string(),
        );
        kv("signal.tail_samples", s.tail_samples.to_string());
        kv(
            "signal.window",
            match s.window {
                crate::signal::Window::Hamming => "hamming".into(),
                crate::signal::Window::None => "none".into(),
            },
        );
        kv("pipeline.highpass_cutoff", self.highpass_cutoff.to_string());
        kv("pipeline.echo_peak_ratio", self.echo_peak_ratio.to_string());
        kv("pipeline.min_match", self.min_match.to_string());
        kv("model.image_size", m.vision.input_shape[1].to_string());
        kv("model.block_layers", join(&m.vision.block_layers));
        kv("model.vision_widths", join(&m.vision.widths));
        kv("model.acoustic_widths", join(&m.acoustic.widths));
        kv("model.hcam_channels", m.hcam_channels.to_string());
        kv("model.key_dim", m.key_dim.to_string());
        kv("model.hcam_levels", join(&m.hcam_levels));
        let g = m.hcam_grids;
        kv(
            "model.hcam_grids",
            join(&[g[0].0, g[0].1, g[1].0, g[1].1, g[2].0, g[2].1]),
        );
        kv("model.fusion", m.fusion.to_string());
        kv("model.bn_momentum", m.bn_momentum.to_string());
        kv("model.bn_eps", m.bn_eps.to_string());
        kv("model.init_seed", m.init_seed.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.alpha", t.alpha.to_string());
        kv("train.mode", t.mode.as_str().into());
        kv("train.seed", t.seed.to_string());
        kv("train.hter_threshold", t.threshold.to_string());
        match &t.split.mode {
            SplitMode::Random => kv("train.split", "random".into()),
            SplitMode::CrossDevice { test_devices } => kv("train.test_devices", join(test_devices)),
        }
        kv("train.split_ratios", join(&t.split.ratios));
        out
    }
}
