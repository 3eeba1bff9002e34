//! Synthetic acoustic channel and face-texture generator.
//!
//! A recording is the probe convolved with a sparse channel (direct path,
//! face impulse response, one background reflection), shaped by a per-device
//! speaker/microphone response and corrupted by band-limited noise.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{band_limit, fir_filter_centered, mean_power};
use crate::signal::{
    self, assemble_probe_signal, hamming, ProbeSignalConfig, SignalError, Waveform,
};

/// Longest face impulse response, matching the extracted echo window.
pub const MAX_FACE_IR_LEN: usize = 60;
/// Extra samples recorded after the probe to hold delayed copies.
pub const RECORDING_MARGIN: usize = 4096;
/// Lower and upper edge of the band in which noise and device response live.
pub const SENSING_BAND: (f64, f64) = (10_000.0, 22_000.0);

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("channel delay {needed} exceeds the {RECORDING_MARGIN}-sample recording margin")]
    DelayOverflow { needed: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Smooth gain curve over the sensing band, realized as a zero-phase FIR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceResponse {
    pub grid_hz: Vec<f64>,
    pub gains: Vec<f64>,
}

impl DeviceResponse {
    pub const GRID_POINTS: usize = 13;
    pub const FIR_TAPS: usize = 63;

    /// Unit gain everywhere.
    pub fn flat() -> Self {
        Self {
            grid_hz: vec![SENSING_BAND.0, 22_050.0],
            gains: vec![1.0, 1.0],
        }
    }

    /// Gains drawn in `1 ± 0.3` on a 13-point grid spanning 10–22.05 kHz, fixed by `device_seed`.
    pub fn random(device_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(device_seed ^ 0xD3_71CE);
        let n = Self::GRID_POINTS;
        let grid_hz = (0..n)
            .map(|i| SENSING_BAND.0 + (22_050.0 - SENSING_BAND.0) * i as f64 / (n - 1) as f64)
            .collect();
        let gains = (0..n)
            .map(|_| 1.0 + 0.3 * rng.random_range(-1.0..=1.0))
            .collect();
        Self { grid_hz, gains }
    }

    /// Piecewise-linear gain at `f`, held constant outside the grid.
    pub fn gain_at(&self, f: f64) -> f64 {
        let (g, x) = (&self.gains, &self.grid_hz);
        if f <= x[0] {
            return g[0];
        }
        for i in 1..x.len() {
            if f <= x[i] {
                let t = (f - x[i - 1]) / (x[i] - x[i - 1]);
                return g[i - 1] + t * (g[i] - g[i - 1]);
            }
        }
        g[g.len() - 1]
    }

    /// Frequency-sampling design: sample the curve on a 512-point grid,
    /// take the real inverse transform, centre and Hamming-window it.
    pub fn fir(&self, sample_rate: u32) -> Vec<f64> {
        let n_fft = 512;
        let fs = f64::from(sample_rate);
        let half = n_fft / 2;
        let gains: Vec<f64> = (0..=half)
            .map(|k| self.gain_at(k as f64 * fs / n_fft as f64))
            .collect();
        // Real, even spectrum → real, even impulse response via the cosine series.
        let taps = Self::FIR_TAPS;
        let centre = (taps / 2) as isize;
        let win = hamming(taps);
        (0..taps)
            .map(|i| {
                let m = (i as isize - centre) as f64;
                let mut acc = gains[0] + gains[half] * (PI * m).cos();
                for (k, g) in gains.iter().enumerate().take(half).skip(1) {
                    acc += 2.0 * g * (2.0 * PI * k as f64 * m / n_fft as f64).cos();
                }
                acc / n_fft as f64 * win[i]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    LiveFace,
    PrintAttack,
    ReplayAttack,
}

impl SurfaceKind {
    pub fn is_bonafide(self) -> bool {
        self == Self::LiveFace
    }
}

/// Geometry of the presented surface. A live face has relief taps after
/// the first reflection; flat media have none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceModel {
    pub kind: SurfaceKind,
    /// `(delay, relative gain)` of each reflection behind the first one.
    pub geometry_params: Vec<(usize, f64)>,
}

impl SurfaceModel {
    pub fn flat(kind: SurfaceKind) -> Self {
        Self {
            kind,
            geometry_params: Vec::new(),
        }
    }

    /// Live faces get 2–4 relief taps at 8–59 samples, magnitude 0.15–0.5 with random sign.
    pub fn sample(kind: SurfaceKind, rng: &mut impl Rng) -> Self {
        if !kind.is_bonafide() {
            return Self::flat(kind);
        }
        let count = rng.random_range(2..=4);
        let positions = rand::seq::index::sample(rng, MAX_FACE_IR_LEN - 8, count);
        let mut geometry_params: Vec<(usize, f64)> = positions
            .into_iter()
            .map(|p| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (p + 8, sign * rng.random_range(0.15..0.5))
            })
            .collect();
        geometry_params.sort_by_key(|&(p, _)| p);
        Self {
            kind,
            geometry_params,
        }
    }

    /// Unit-peak impulse response; total absolute gain is capped at 2.
    pub fn impulse_response(&self) -> Vec<f64> {
        let len = self
            .geometry_params
            .iter()
            .map(|&(p, _)| p + 1)
            .max()
            .unwrap_or(1);
        let mut ir = vec![0.0; len.min(MAX_FACE_IR_LEN)];
        ir[0] = 1.0;
        for &(p, g) in &self.geometry_params {
            if p < MAX_FACE_IR_LEN {
                ir[p] += g;
            }
        }
        let l1: f64 = ir.iter().map(|v| v.abs()).sum();
        if l1 > 2.0 {
            ir.iter_mut().for_each(|v| *v *= 2.0 / l1);
        }
        ir
    }
}

/// Every parameter that defines one simulated capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScenario {
    pub direct_path_delay: usize,
    pub direct_path_gain: f64,
    /// Delay of the first face reflection after the direct path.
    pub face_echo_delay: usize,
    /// Face reflection taps, already scaled by the face gain.
    pub face_impulse_response: Vec<f64>,
    /// Delay of the background reflection after the direct path.
    pub background_echo_delay: usize,
    pub background_gain: f64,
    /// `None` disables noise.
    pub noise_snr_db: Option<f64>,
    pub device_response: DeviceResponse,
}

impl ChannelScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ChannelError::InvalidScenario(m));
        let face_peak = self
            .face_impulse_response
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if self.face_impulse_response.is_empty()
            || self.face_impulse_response.len() > MAX_FACE_IR_LEN
        {
            return bad(format!(
                "face response has {} taps, expected 1..={MAX_FACE_IR_LEN}",
                self.face_impulse_response.len()
            ));
        }
        if !(self.direct_path_gain > face_peak
            && face_peak > self.background_gain
            && self.background_gain >= 0.0)
        {
            return bad(format!(
                "gains must satisfy direct {} > face {face_peak} > background {} >= 0",
                self.direct_path_gain, self.background_gain
            ));
        }
        if self.face_echo_delay == 0 || self.background_echo_delay <= self.face_echo_delay {
            return bad(format!(
                "delays must satisfy 0 < face {} < background {}",
                self.face_echo_delay, self.background_echo_delay
            ));
        }
        Ok(())
    }

    /// Sparse channel impulse response relative to the direct-path arrival.
    pub fn channel_taps(&self) -> Vec<(usize, f64)> {
        let mut taps = vec![(0, self.direct_path_gain)];
        taps.extend(
            self.face_impulse_response
                .iter()
                .enumerate()
                .filter(|(_, g)| **g != 0.0)
                .map(|(i, &g)| (self.face_echo_delay + i, g)),
        );
        if self.background_gain != 0.0 {
            taps.push((self.background_echo_delay, self.background_gain));
        }
        taps
    }

    fn extent(&self) -> usize {
        self.direct_path_delay
            + (self.face_echo_delay + self.face_impulse_response.len())
                .max(self.background_echo_delay + 1)
    }
}

/// Parameter ranges for random scenarios (half-open integer ranges).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRanges {
    pub direct_delay: (usize, usize),
    pub direct_gain: (f64, f64),
    /// 64–116 samples ≈ 25–45 cm round trip at 44.1 kHz.
    pub face_delay: (usize, usize),
    pub face_gain: (f64, f64),
    /// Minimum spacing between face and background reflections, and the latest background delay.
    pub background_after_face: usize,
    pub background_max_delay: usize,
    pub background_gain: (f64, f64),
}

impl Default for ScenarioRanges {
    fn default() -> Self {
        Self {
            direct_delay: (100, 2000),
            direct_gain: (0.8, 1.0),
            face_delay: (64, 117),
            face_gain: (0.2, 0.35),
            background_after_face: 130,
            background_max_delay: 500,
            background_gain: (0.04, 0.12),
        }
    }
}

impl ScenarioRanges {
    pub fn sample(
        &self,
        surface: &SurfaceModel,
        noise_snr_db: Option<f64>,
        device_response: DeviceResponse,
        rng: &mut impl Rng,
    ) -> ChannelScenario {
        let direct_path_delay = rng.random_range(self.direct_delay.0..self.direct_delay.1);
        let direct_path_gain = rng.random_range(self.direct_gain.0..=self.direct_gain.1);
        let face_echo_delay = rng.random_range(self.face_delay.0..self.face_delay.1);
        let face_gain = rng.random_range(self.face_gain.0..=self.face_gain.1);
        let lo = face_echo_delay + self.background_after_face;
        let background_echo_delay = rng.random_range(lo..self.background_max_delay.max(lo + 1));
        let background_gain = rng.random_range(self.background_gain.0..=self.background_gain.1);
        ChannelScenario {
            direct_path_delay,
            direct_path_gain,
            face_echo_delay,
            face_impulse_response: surface
                .impulse_response()
                .iter()
                .map(|v| v * face_gain)
                .collect(),
            background_echo_delay,
            background_gain,
            noise_snr_db,
            device_response,
        }
    }
}

/// Noise-free channel output before the device response.
fn propagate(probe: &Waveform, scenario: &ChannelScenario) -> Vec<f64> {
    let mut y = vec![0.0; probe.len() + RECORDING_MARGIN];
    for (delay, gain) in scenario.channel_taps() {
        let at = scenario.direct_path_delay + delay;
        for (dst, s) in y[at..at + probe.len()].iter_mut().zip(&probe.samples) {
            *dst += gain * s;
        }
    }
    y
}

/// Simulated microphone capture of `probe` under `scenario`.
///
/// The output is `probe.len() + RECORDING_MARGIN` samples. Noise, if any, is
/// white noise restricted to the sensing band and scaled so that its power is
/// exactly `snr` dB below the clean recording's power.
pub fn simulate_recording(
    probe: &Waveform,
    scenario: &ChannelScenario,
    seed: u64,
) -> Result<Waveform> {
    scenario.validate()?;
    if scenario.extent() > RECORDING_MARGIN {
        return Err(ChannelError::DelayOverflow {
            needed: scenario.extent(),
        });
    }
    let raw = propagate(probe, scenario);
    let mut y = fir_filter_centered(&raw, &scenario.device_response.fir(probe.sample_rate));
    if let Some(snr) = scenario.noise_snr_db {
        let noise = band_noise(y.len(), probe.sample_rate, seed);
        let scale = (mean_power(&y) / 10f64.powf(snr / 10.0) / mean_power(&noise)).sqrt();
        for (v, n) in y.iter_mut().zip(&noise) {
            *v += scale * n;
        }
    }
    Ok(Waveform::new(y, probe.sample_rate))
}

/// Gaussian white noise restricted to the sensing band.
pub fn band_noise(len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    band_limit(
        &white,
        f64::from(sample_rate),
        SENSING_BAND.0,
        SENSING_BAND.1,
    )
}

/// Row-major `height × width × 3` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FaceImage {
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    /// Channel-major `3 × h × w` box-average downsample; `h`, `w` must divide the size.
    pub fn to_chw(&self, h: usize, w: usize) -> Vec<f64> {
        assert!(
            self.height.is_multiple_of(h) && self.width.is_multiple_of(w),
            "{}x{} is not a multiple of {h}x{w}",
            self.height,
            self.width
        );
        let (fy, fx) = (self.height / h, self.width / w);
        let norm = (fy * fx) as f64;
        let mut out = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = 0.0;
                    for y in oy * fy..(oy + 1) * fy {
                        for x in ox * fx..(ox + 1) * fx {
                            acc += self.data[(y * self.width + x) * 3 + c];
                        }
                    }
                    out[(c * h + oy) * w + ox] = acc / norm;
                }
            }
        }
        out
    }
}

/// Procedural face: a shaded ellipsoid over a soft background. Attacks add
/// their medium's artefacts: halftone dots and washed-out colour for prints,
/// a multiplicative two-grating moiré for screen replays.
pub fn synth_face_image(model: &SurfaceModel, size: usize, seed: u64) -> FaceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (cx, cy) = (
        s * rng.random_range(0.45..0.55),
        s * rng.random_range(0.45..0.55),
    );
    let (ax, ay) = (
        s * rng.random_range(0.28..0.34),
        s * rng.random_range(0.36..0.42),
    );
    let skin = [
        rng.random_range(0.55..0.9),
        rng.random_range(0.4..0.7),
        rng.random_range(0.3..0.55),
    ];
    let bg = [
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
    ];
    let light = {
        let (lx, ly) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let lz: f64 = 1.0;
        let n = (lx * lx + ly * ly + lz * lz).sqrt();
        [lx / n, ly / n, lz / n]
    };

    let moire = (
        rng.random_range(0.9..1.3),
        rng.random_range(0.0..PI),
        rng.random_range(0.05..0.15),
    );
    let dot_period = rng.random_range(3..=4) as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5 - cx) / ax, (y as f64 + 0.5 - cy) / ay);
            let r2 = u * u + v * v;
            let mut px = if r2 < 1.0 {
                let z = (1.0 - r2).sqrt();
                let shade = (u * light[0] + v * light[1] + z * light[2]).max(0.0);
                let k = 0.35 + 0.65 * shade;
                [skin[0] * k, skin[1] * k, skin[2] * k]
            } else {
                let g = 0.85 + 0.15 * (y as f64 / s);
                [bg[0] * g, bg[1] * g, bg[2] * g]
            };
            match model.kind {
                SurfaceKind::LiveFace => {}
                SurfaceKind::PrintAttack => {
                    let dot = ((2.0 * PI * x as f64 / dot_period).cos()
                        * (2.0 * PI * y as f64 / dot_period).cos())
                        * 0.12;
                    let grey = (px[0] + px[1] + px[2]) / 3.0;
                    for c in &mut px {
                        *c = 0.6 * *c + 0.4 * grey + dot + 0.05;
                    }
                }
                SurfaceKind::ReplayAttack => {
                    let (f, angle, depth) = moire;
                    let (xf, yf) = (x as f64, y as f64);
                    let g1 = (2.0 * PI * f * xf).cos();
                    let g2 = (2.0
                        * PI
                        * f
                        * (xf * (1.0 - 0.02 * angle.cos()) + 0.05 * yf * angle.sin()))
                    .cos();
                    let m = 1.0 + 2.0 * depth * g1 * g2;
                    px = [px[0] * m * 0.95, px[1] * m, px[2] * m * 1.1 + 0.03];
                }
            }
            for c in px {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push((c + 0.01 * noise).clamp(0.0, 1.0));
            }
        }
    }
    FaceImage {
        width: size,
        height: size,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    /// 1 for bonafide, 0 for attack.
    pub fn as_target(self) -> f64 {
        match self {
            Self::Bonafide => 1.0,
            Self::Attack => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bonafide => "bonafide",
            Self::Attack => "attack",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bonafide" => Ok(Self::Bonafide),
            "attack" => Ok(Self::Attack),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: FaceImage,
    pub recording: Waveform,
    pub label: Label,
    pub surface: SurfaceModel,
    pub scenario: ChannelScenario,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub probe: ProbeSignalConfig,
    pub ranges: ScenarioRanges,
    pub image_size: usize,
    /// SNR drawn uniformly from this range; `None` gives noise-free recordings.
    pub snr_db: Option<(f64, f64)>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            probe: ProbeSignalConfig::default(),
            ranges: ScenarioRanges::default(),
            image_size: 128,
            snr_db: Some((15.0, 30.0)),
        }
    }
}

/// Independent stream seed for one sample.
pub fn sample_seed(seed: u64, device: usize, label: Label, index: usize) -> u64 {
    let mut z = seed
        ^ (device as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ u64::from(label == Label::Attack).wrapping_mul(0x94D0_49BB_1331_11EB);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate one labelled pair. Attacks alternate print / replay by index.
pub fn generate_sample(
    probe: &Waveform,
    label: Label,
    index: usize,
    device_response: &DeviceResponse,
    config: &DatasetConfig,
    seed: u64,
) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = match label {
        Label::Bonafide => SurfaceKind::LiveFace,
        Label::Attack if index.is_multiple_of(2) => SurfaceKind::PrintAttack,
        Label::Attack => SurfaceKind::ReplayAttack,
    };
    let surface = SurfaceModel::sample(kind, &mut rng);
    let snr = config.snr_db.map(|(lo, hi)| {
        if lo < hi {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    });
    let scenario = config
        .ranges
        .sample(&surface, snr, device_response.clone(), &mut rng);
    let recording = simulate_recording(probe, &scenario, rng.random())?;
    let image = synth_face_image(&surface, config.image_size, rng.random());
    Ok(SyntheticSample {
        image,
        recording,
        label,
        surface,
        scenario,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub label: Label,
    pub device: usize,
    pub image_path: PathBuf,
    pub wav_path: PathBuf,
    pub scenario_json: String,
}

/// Table of samples; paths are relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tlabel\tdevice\timage_path\twav_path\tscenario_json";

impl DatasetManifest {
    pub fn write(&self) -> Result<()> {
        let mut out = io::BufWriter::new(fs::File::create(self.root.join(MANIFEST_FILE))?);
        writeln!(out, "{MANIFEST_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.label.as_str(),
                r.device,
                r.image_path.display(),
                r.wav_path.display(),
                r.scenario_json
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let file = fs::File::open(root.join(MANIFEST_FILE))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim_end() != MANIFEST_HEADER {
            return Err(ChannelError::Manifest(format!(
                "unexpected header `{header}`"
            )));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.splitn(6, '\t').collect();
            let [id, label, device, image, wav, scenario] = cols[..] else {
                return Err(ChannelError::Manifest(format!(
                    "line {}: expected 6 columns",
                    n + 2
                )));
            };
            let err = |m: String| ChannelError::Manifest(format!("line {}: {m}", n + 2));
            rows.push(ManifestRow {
                id: id.to_string(),
                label: label.parse().map_err(err)?,
                device: device.parse().map_err(|e| err(format!("device: {e}")))?,
                image_path: PathBuf::from(image),
                wav_path: PathBuf::from(wav),
                scenario_json: scenario.to_string(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            rows,
        })
    }

    pub fn scenario(&self, row: &ManifestRow) -> Result<ChannelScenario> {
        serde_json::from_str(&row.scenario_json)
            .map_err(|e| ChannelError::Manifest(format!("{}: {e}", row.id)))
    }
}

/// Write `n_per_class` bonafide and attack samples per device under `out`.
pub fn build_dataset(
    n_per_class: usize,
    devices: &[DeviceResponse],
    config: &DatasetConfig,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(ChannelError::InvalidScenario(
            "n_per_class must be at least 1".into(),
        ));
    }
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("audio"))?;
    let probe = assemble_probe_signal(&config.probe)?;
    let mut rows = Vec::with_capacity(2 * n_per_class * devices.len());
    for (d, device) in devices.iter().enumerate() {
        for label in [Label::Bonafide, Label::Attack] {
            for i in 0..n_per_class {
                let s = generate_sample(
                    &probe,
                    label,
                    i,
                    device,
                    config,
                    sample_seed(seed, d, label, i),
                )?;
                let id = format!("d{d}_{}_{i:05}", label.as_str());
                let image_path = PathBuf::from("images").join(format!("{id}.png"));
                let wav_path = PathBuf::from("audio").join(format!("{id}.wav"));
                s.image.save_png(&out.join(&image_path))?;
                signal::write_wav(&s.recording, &out.join(&wav_path))?;
                rows.push(ManifestRow {
                    id,
                    label,
                    device: d,
                    image_path,
                    wav_path,
                    scenario_json: serde_json::to_string(&s.scenario).expect("scenario serializes"),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        rows,
    };
    manifest.write()?;
    Ok(manifest)
}
