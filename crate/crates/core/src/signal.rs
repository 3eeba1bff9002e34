//! Probe signal synthesis: a pilot tone followed by nine windowed linear chirps.
//!
//! The layout is fixed by the gaps in [`ProbeSignalConfig`], so every chirp
//! onset is a closed-form sample index (see [`ProbeSignalConfig::chirp_onsets`]).

use std::f64::consts::PI;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid chirp: {0}")]
    InvalidSpec(String),
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed wav file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// A mono discrete-time signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(
            self.samples.iter().map(|s| s * c).collect(),
            self.sample_rate,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hamming,
    None,
}

impl std::str::FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hamming" => Ok(Self::Hamming),
            "none" => Ok(Self::None),
            other => Err(format!("unknown window `{other}`")),
        }
    }
}

/// One linear frequency sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChirpSpec {
    pub f_start: f64,
    pub f_end: f64,
    pub duration_samples: usize,
    pub amplitude: f64,
}

impl ChirpSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.f_start > 0.0 && self.f_start < self.f_end) {
            return Err(SignalError::InvalidSpec(format!(
                "need 0 < f_start < f_end, got {} -> {} Hz",
                self.f_start, self.f_end
            )));
        }
        if self.f_end >= nyquist {
            return Err(SignalError::InvalidSpec(format!(
                "f_end {} Hz is not below Nyquist {nyquist} Hz",
                self.f_end
            )));
        }
        if self.duration_samples < 16 {
            return Err(SignalError::InvalidSpec(format!(
                "duration {} samples is shorter than 16",
                self.duration_samples
            )));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(SignalError::InvalidSpec(format!(
                "amplitude {} outside (0, 1]",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// Sweep bands of the three chirp groups, in emission order.
pub const CHIRP_GROUPS: [(f64, f64); 3] = [
    (12_000.0, 17_000.0),
    (14_000.0, 19_000.0),
    (16_000.0, 21_000.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSignalConfig {
    pub sample_rate: u32,
    pub pilot_freq: f64,
    pub pilot_duration_samples: usize,
    pub pilot_amplitude: f64,
    pub gap_pilot_to_first_chirp: usize,
    pub gap_between_chirps: usize,
    /// Silence after the last chirp so its echoes are still recorded.
    pub tail_samples: usize,
    pub chirp_specs: Vec<ChirpSpec>,
    pub window: Window,
}

impl Default for ProbeSignalConfig {
    fn default() -> Self {
        Self::with_chirp_length(60)
    }
}

impl ProbeSignalConfig {
    /// Default layout with every chirp `chirp_len` samples long.
    pub fn with_chirp_length(chirp_len: usize) -> Self {
        let chirp_specs = (0..9)
            .map(|k| {
                let (f_start, f_end) = CHIRP_GROUPS[k % 3];
                ChirpSpec {
                    f_start,
                    f_end,
                    duration_samples: chirp_len,
                    amplitude: 0.5,
                }
            })
            .collect();
        Self {
            sample_rate: 44_100,
            pilot_freq: 11_025.0,
            pilot_duration_samples: 64,
            pilot_amplitude: 0.5,
            gap_pilot_to_first_chirp: 8000,
            gap_between_chirps: 3000,
            tail_samples: 3000,
            chirp_specs,
            window: Window::Hamming,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SignalError::InvalidConfig(m));
        if self.sample_rate == 0 {
            return bad("sample rate is zero".into());
        }
        if self.chirp_specs.is_empty() {
            return bad("no chirps".into());
        }
        if self.chirp_specs.len() != 9 {
            return bad(format!("expected 9 chirps, got {}", self.chirp_specs.len()));
        }
        for spec in &self.chirp_specs {
            spec.validate(self.sample_rate)?;
        }
        for (k, spec) in self.chirp_specs.iter().enumerate().skip(3) {
            let first = &self.chirp_specs[k % 3];
            if (spec.f_start, spec.f_end) != (first.f_start, first.f_end) {
                return bad(format!(
                    "chirp {k} does not repeat the band of chirp {}",
                    k % 3
                ));
            }
        }
        if self.pilot_duration_samples == 0 {
            return bad("pilot duration is zero".into());
        }
        if !(self.pilot_amplitude > 0.0 && self.pilot_amplitude <= 1.0) {
            return bad(format!(
                "pilot amplitude {} outside (0, 1]",
                self.pilot_amplitude
            ));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if !(self.pilot_freq > 0.0 && self.pilot_freq < nyquist) {
            return bad(format!(
                "pilot frequency {} Hz outside (0, Nyquist)",
                self.pilot_freq
            ));
        }
        let min_start = self
            .chirp_specs
            .iter()
            .map(|c| c.f_start)
            .fold(f64::INFINITY, f64::min);
        if self.pilot_freq >= min_start {
            return bad(format!(
                "pilot {} Hz must lie below the lowest chirp start {min_start} Hz",
                self.pilot_freq
            ));
        }
        let longest = self.longest_chirp();
        if self.gap_pilot_to_first_chirp <= longest || self.gap_between_chirps <= longest {
            return bad(format!(
                "gaps {}/{} must exceed the chirp duration {longest}",
                self.gap_pilot_to_first_chirp, self.gap_between_chirps
            ));
        }
        Ok(())
    }

    pub fn longest_chirp(&self) -> usize {
        self.chirp_specs
            .iter()
            .map(|c| c.duration_samples)
            .max()
            .unwrap_or(0)
    }

    /// Onset of each chirp relative to the start of the pilot.
    pub fn chirp_onsets(&self) -> Vec<usize> {
        let mut at = self.pilot_duration_samples + self.gap_pilot_to_first_chirp;
        self.chirp_specs
            .iter()
            .map(|c| {
                let onset = at;
                at += c.duration_samples + self.gap_between_chirps;
                onset
            })
            .collect()
    }

    /// Total length of the assembled probe.
    pub fn total_len(&self) -> usize {
        let chirps: usize = self.chirp_specs.iter().map(|c| c.duration_samples).sum();
        self.pilot_duration_samples
            + self.gap_pilot_to_first_chirp
            + chirps
            + self.gap_between_chirps * self.chirp_specs.len().saturating_sub(1)
            + self.tail_samples
    }

    /// The windowed chirps exactly as they appear in the probe.
    pub fn chirp_templates(&self) -> Result<Vec<Waveform>> {
        self.chirp_specs
            .iter()
            .map(|s| generate_chirp(s, self.sample_rate).map(|c| apply_window(&c, self.window)))
            .collect()
    }
}

/// Linear sweep `A·sin(2π(f0·t + (f1−f0)/(2T)·t²))` over `duration_samples`.
pub fn generate_chirp(spec: &ChirpSpec, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let fs = f64::from(sample_rate);
    let dur = spec.duration_samples as f64 / fs;
    let rate = (spec.f_end - spec.f_start) / (2.0 * dur);
    let samples = (0..spec.duration_samples)
        .map(|n| {
            let t = n as f64 / fs;
            spec.amplitude * (2.0 * PI * (spec.f_start * t + rate * t * t)).sin()
        })
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}

/// Symmetric Hamming window `0.54 − 0.46·cos(2πn/(N−1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
            .collect(),
    }
}

pub fn apply_window(w: &Waveform, window: Window) -> Waveform {
    match window {
        Window::None => w.clone(),
        Window::Hamming => {
            let win = hamming(w.len());
            Waveform::new(
                w.samples.iter().zip(&win).map(|(s, h)| s * h).collect(),
                w.sample_rate,
            )
        }
    }
}

/// Tone burst at the pilot frequency, shaped by the configured window.
pub fn generate_pilot(config: &ProbeSignalConfig) -> Result<Waveform> {
    let fs = f64::from(config.sample_rate);
    if config.pilot_duration_samples == 0 {
        return Err(SignalError::InvalidConfig("pilot duration is zero".into()));
    }
    if config.sample_rate == 0 || !(config.pilot_freq > 0.0 && config.pilot_freq < fs / 2.0) {
        return Err(SignalError::InvalidConfig(format!(
            "pilot frequency {} Hz outside (0, Nyquist)",
            config.pilot_freq
        )));
    }
    let tone = (0..config.pilot_duration_samples)
        .map(|n| config.pilot_amplitude * (2.0 * PI * config.pilot_freq * n as f64 / fs).sin())
        .collect();
    Ok(apply_window(
        &Waveform::new(tone, config.sample_rate),
        config.window,
    ))
}

/// `[pilot][gap][chirp 1][gap][chirp 2] … [chirp 9][tail]`.
pub fn assemble_probe_signal(config: &ProbeSignalConfig) -> Result<Waveform> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.total_len());
    out.extend(generate_pilot(config)?.samples);
    out.resize(out.len() + config.gap_pilot_to_first_chirp, 0.0);
    let templates = config.chirp_templates()?;
    for (k, chirp) in templates.iter().enumerate() {
        if k > 0 {
            out.resize(out.len() + config.gap_between_chirps, 0.0);
        }
        out.extend_from_slice(&chirp.samples);
    }
    out.resize(out.len() + config.tail_samples, 0.0);
    Ok(Waveform::new(out, config.sample_rate))
}

const PCM_SCALE: f64 = 32767.0;

/// Mono 16-bit PCM. Samples are clamped to [−1, 1] before quantization.
pub fn write_wav(w: &Waveform, path: &Path) -> Result<()> {
    if !w.is_finite() {
        return Err(SignalError::InvalidConfig(
            "waveform has non-finite samples".into(),
        ));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Reads mono 16-bit PCM. Failing to open the file is an io error; anything
/// wrong with its contents is reported as malformed.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = io::BufReader::new(std::fs::File::open(path)?);
    let malformed = |e: hound::Error| SignalError::Malformed(e.to_string());
    let reader = hound::WavReader::new(file).map_err(malformed)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(SignalError::Malformed(format!(
            "expected mono 16-bit PCM, got {} channel(s), {} bit {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| (f64::from(v) / PCM_SCALE).clamp(-1.0, 1.0)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(malformed)?;
    if samples.len() != expected {
        return Err(SignalError::Malformed(format!(
            "header announces {expected} samples, found {}",
            samples.len()
        )));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

fn wav_err(e: hound::Error) -> SignalError {
    match e {
        hound::Error::IoError(io) => SignalError::Io(io),
        other => SignalError::Malformed(other.to_string()),
    }
}
