//! Recording → spectrogram: high-pass, pilot sync, chirp segmentation,
//! direct-path removal, adaptive face-echo search and STFT.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::dsp::fir_filter_centered;
use crate::signal::{generate_pilot, ProbeSignalConfig, SignalError, Waveform};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("high-pass cutoff {cutoff} Hz must lie in (0, {nyquist}) Hz")]
    InvalidCutoff { cutoff: f64, nyquist: f64 },
    #[error("template of {template} samples is longer than the {signal}-sample signal")]
    TemplateTooLong { template: usize, signal: usize },
    #[error("recording of {have} samples is shorter than the {need}-sample probe layout")]
    RecordingTooShort { have: usize, need: usize },
    #[error("no pilot found (normalized correlation {0:.3})")]
    NoPilot(f64),
    #[error("clip {clip}: no direct-path peak (normalized correlation {score:.3})")]
    NoPeak { clip: usize, score: f64 },
    #[error("{what} at {index} (+{len}) runs past {limit} samples")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        len: usize,
        limit: usize,
    },
    #[error("search span leaves no room for a {0}-sample window")]
    EmptySearchSpan(usize),
    #[error("no window holds a strong echo in every clip")]
    NoConsistentEcho,
    #[error("echo of {have} samples is shorter than the {need}-sample STFT window")]
    TooShort { have: usize, need: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub const HIGHPASS_TAPS: usize = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub sample_rate: u32,
    pub highpass_cutoff: f64,
    pub pilot_template: Waveform,
    pub chirp_templates: Vec<Waveform>,
    pub gap_pilot_to_first_chirp: usize,
    pub gap_between_chirps: usize,
    pub echo_window: usize,
    pub search_span: usize,
    pub stft_window: usize,
    pub stft_hop: usize,
    /// A search window is eligible only if, in every clip, its strongest
    /// correlation reaches this fraction of that clip's overall maximum.
    pub echo_peak_ratio: f64,
    /// Minimum normalized correlation accepted as a pilot or direct-path match.
    pub min_match: f64,
}

impl PipelineConfig {
    /// Templates and layout taken from the emitted probe; other fields at their defaults.
    pub fn from_probe(probe: &ProbeSignalConfig) -> Result<Self> {
        probe.validate()?;
        Ok(Self {
            sample_rate: probe.sample_rate,
            highpass_cutoff: 10_000.0,
            pilot_template: generate_pilot(probe)?,
            chirp_templates: probe.chirp_templates()?,
            gap_pilot_to_first_chirp: probe.gap_pilot_to_first_chirp,
            gap_between_chirps: probe.gap_between_chirps,
            echo_window: 60,
            search_span: 600,
            stft_window: 64,
            stft_hop: 16,
            echo_peak_ratio: 0.25,
            min_match: 0.3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.chirp_templates.len() != 9 {
            return bad(format!(
                "expected 9 chirp templates, got {}",
                self.chirp_templates.len()
            ));
        }
        if self.pilot_template.is_empty() || self.chirp_templates.iter().any(Waveform::is_empty) {
            return bad("empty template".into());
        }
        if self.echo_window != 60 {
            return bad(format!(
                "echo window must be 60 samples, got {}",
                self.echo_window
            ));
        }
        if self.search_span <= self.echo_window {
            return bad(format!(
                "search span {} must exceed the echo window {}",
                self.search_span, self.echo_window
            ));
        }
        if self.stft_window == 0 || self.stft_hop == 0 || self.stft_hop > self.stft_window {
            return bad(format!(
                "need 0 < hop {} <= window {}",
                self.stft_hop, self.stft_window
            ));
        }
        if !(0.0..=1.0).contains(&self.echo_peak_ratio) || !(0.0..=1.0).contains(&self.min_match) {
            return bad("ratios must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Onsets of the chirps relative to the pilot start.
    pub fn chirp_offsets(&self) -> Vec<usize> {
        let mut at = self.pilot_template.len() + self.gap_pilot_to_first_chirp;
        self.chirp_templates
            .iter()
            .map(|c| {
                let o = at;
                at += c.len() + self.gap_between_chirps;
                o
            })
            .collect()
    }

    pub fn clip_len(&self, k: usize) -> usize {
        self.chirp_templates[k].len() + self.search_span
    }

    /// Samples from the pilot start to the end of the last clip.
    pub fn layout_len(&self) -> usize {
        let last = self.chirp_templates.len() - 1;
        self.chirp_offsets()[last] + self.clip_len(last)
    }

    pub fn n_freq(&self) -> usize {
        self.stft_window / 2 + 1
    }

    pub fn n_frames(&self) -> usize {
        let len = self.echo_window * self.chirp_templates.len();
        if len < self.stft_window {
            0
        } else {
            (len - self.stft_window) / self.stft_hop + 1
        }
    }
}

/// Windowed-sinc high-pass: Hamming-windowed low-pass, spectrally inverted.
pub fn design_highpass(cutoff: f64, sample_rate: u32, taps: usize) -> Result<Vec<f64>> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if !(cutoff > 0.0 && cutoff < nyquist) || taps.is_multiple_of(2) {
        return Err(PipelineError::InvalidCutoff { cutoff, nyquist });
    }
    let fc = cutoff / f64::from(sample_rate);
    let mid = (taps - 1) / 2;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let m = i as f64 - mid as f64;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * m).sin() / (PI * m)
            };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (taps - 1) as f64).cos();
            -sinc * w
        })
        .collect();
    h[mid] += 1.0;
    Ok(h)
}

/// Linear-phase high-pass with its group delay removed, so indices match the input.
pub fn highpass_filter(w: &Waveform, cutoff: f64) -> Result<Waveform> {
    let h = design_highpass(cutoff, w.sample_rate, HIGHPASS_TAPS)?;
    Ok(Waveform::new(
        fir_filter_centered(&w.samples, &h),
        w.sample_rate,
    ))
}

/// Valid-mode sliding dot product: `out[i] = Σ_j signal[i + j]·template[j]`.
pub fn cross_correlate(signal: &[f64], template: &[f64]) -> Result<Vec<f64>> {
    if template.len() > signal.len() {
        return Err(PipelineError::TemplateTooLong {
            template: template.len(),
            signal: signal.len(),
        });
    }
    if template.is_empty() {
        return Ok(vec![0.0; signal.len() + 1]);
    }
    Ok(signal
        .windows(template.len())
        .map(|win| win.iter().zip(template).map(|(a, b)| a * b).sum())
        .collect())
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in xs.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Cosine similarity of `template` with the signal segment starting at `at`.
fn normalized_match(signal: &[f64], template: &[f64], at: usize, raw: f64) -> f64 {
    let seg = &signal[at..at + template.len()];
    let norm = (seg.iter().map(|v| v * v).sum::<f64>()
        * template.iter().map(|v| v * v).sum::<f64>())
    .sqrt();
    if norm == 0.0 {
        0.0
    } else {
        raw / norm
    }
}

/// Start of the pilot in `rec`: the argmax of its correlation with the pilot template.
pub fn locate_pilot(rec: &Waveform, cfg: &PipelineConfig) -> Result<usize> {
    let need = cfg.layout_len();
    if rec.len() < need {
        return Err(PipelineError::RecordingTooShort {
            have: rec.len(),
            need,
        });
    }
    let template = &cfg.pilot_template.samples;
    let corr = cross_correlate(&rec.samples, template)?;
    let idx = argmax(&corr).expect("nonempty correlation");
    let score = normalized_match(&rec.samples, template, idx, corr[idx]);
    if score < cfg.min_match {
        return Err(PipelineError::NoPilot(score));
    }
    Ok(idx)
}

/// Nine equal-layout clips cut from a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct ChirpClipSet {
    pub clips: Vec<Waveform>,
    pub onsets: Vec<usize>,
}

/// Cut one clip per chirp at its expected arrival; each spans the chirp plus the search span.
pub fn segment_chirps(
    rec: &Waveform,
    pilot_idx: usize,
    cfg: &PipelineConfig,
) -> Result<ChirpClipSet> {
    let mut clips = Vec::with_capacity(cfg.chirp_templates.len());
    let mut onsets = Vec::with_capacity(cfg.chirp_templates.len());
    for (k, offset) in cfg.chirp_offsets().into_iter().enumerate() {
        let onset = pilot_idx + offset;
        let len = cfg.clip_len(k);
        if onset + len > rec.len() {
            return Err(PipelineError::OutOfBounds {
                what: "chirp clip",
                index: onset,
                len,
                limit: rec.len(),
            });
        }
        clips.push(Waveform::new(
            rec.samples[onset..onset + len].to_vec(),
            rec.sample_rate,
        ));
        onsets.push(onset);
    }
    Ok(ChirpClipSet { clips, onsets })
}

/// Zero the chirp-length span at each clip's strongest template match.
pub fn remove_direct_path(clips: &ChirpClipSet, cfg: &PipelineConfig) -> Result<ChirpClipSet> {
    let mut out = clips.clone();
    for (k, (clip, template)) in out.clips.iter_mut().zip(&cfg.chirp_templates).enumerate() {
        let corr = cross_correlate(&clip.samples, &template.samples)?;
        let p = argmax(&corr).expect("nonempty correlation");
        let score = normalized_match(&clip.samples, &template.samples, p, corr[p]);
        if !(score >= cfg.min_match && corr[p] > 0.0) {
            return Err(PipelineError::NoPeak { clip: k, score });
        }
        clip.samples[p..p + template.len()].fill(0.0);
    }
    Ok(out)
}

/// Candidate positions of one search window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStat {
    pub start: usize,
    pub positions: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub eligible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EchoLocation {
    pub position: usize,
    pub window: usize,
    pub std: f64,
    pub history: Vec<WindowStat>,
}

fn mean_std(xs: &[usize]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<usize>() as f64 / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Slide an `echo_window`-wide window (stride 1) over every clip's template
/// correlation. Each window yields one candidate per clip, the position of
/// its strongest correlation. Among windows whose candidates are all strong
/// (see [`PipelineConfig::echo_peak_ratio`]) the one with the smallest
/// population std wins, earliest on ties, and its mean rounded half-up is
/// the shared echo position.
pub fn locate_face_echo_adaptive(
    clips: &ChirpClipSet,
    cfg: &PipelineConfig,
) -> Result<EchoLocation> {
    let w = cfg.echo_window;
    let corrs: Vec<Vec<f64>> = clips
        .clips
        .iter()
        .zip(&cfg.chirp_templates)
        .map(|(c, t)| cross_correlate(&c.samples, &t.samples))
        .collect::<Result<_>>()?;
    let span = corrs.iter().map(Vec::len).min().unwrap_or(0);
    if span < w {
        return Err(PipelineError::EmptySearchSpan(w));
    }
    let floors: Vec<f64> = corrs
        .iter()
        .map(|c| cfg.echo_peak_ratio * c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let mut history: Vec<WindowStat> = Vec::with_capacity(span - w + 1);
    let mut best: Option<usize> = None;
    for start in 0..=span - w {
        let mut eligible = true;
        let positions: Vec<usize> = corrs
            .iter()
            .zip(&floors)
            .map(|(c, &floor)| {
                let win = &c[start..start + w];
                let i = argmax(win).expect("nonempty window");
                eligible &= win[i] >= floor && win[i] > 0.0;
                start + i
            })
            .collect();
        let (mean, std) = mean_std(&positions);
        if eligible && best.is_none_or(|b| std < history[b].std) {
            best = Some(history.len());
        }
        history.push(WindowStat {
            start,
            positions,
            mean,
            std,
            eligible,
        });
    }
    let b = best.ok_or(PipelineError::NoConsistentEcho)?;
    let chosen = &history[b];
    Ok(EchoLocation {
        position: (chosen.mean + 0.5).floor() as usize,
        window: chosen.start,
        std: chosen.std,
        history,
    })
}

/// Concatenated face-region samples, `echo_window` per clip in chirp order.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceEcho {
    pub echo: Waveform,
    pub position: usize,
}

pub fn extract_face_echoes(
    clips: &ChirpClipSet,
    position: usize,
    cfg: &PipelineConfig,
) -> Result<FaceEcho> {
    let w = cfg.echo_window;
    let mut echo = Vec::with_capacity(w * clips.clips.len());
    for clip in &clips.clips {
        if position + w > clip.len() {
            return Err(PipelineError::OutOfBounds {
                what: "echo window",
                index: position,
                len: w,
                limit: clip.len(),
            });
        }
        echo.extend_from_slice(&clip.samples[position..position + w]);
    }
    let rate = clips
        .clips
        .first()
        .map_or(cfg.sample_rate, |c| c.sample_rate);
    Ok(FaceEcho {
        echo: Waveform::new(echo, rate),
        position,
    })
}

/// Frequency-major `n_freq × n_frames` magnitude grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Vec<f64>,
    pub n_freq: usize,
    pub n_frames: usize,
    pub freq_resolution: f64,
    pub time_resolution: usize,
}

impl Spectrogram {
    pub fn at(&self, f: usize, t: usize) -> f64 {
        self.magnitudes[f * self.n_frames + t]
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Raw STFT magnitudes with a Hann window; no compression or normalization.
pub fn stft_magnitude(echo: &Waveform, cfg: &PipelineConfig) -> Result<Spectrogram> {
    let (n, hop) = (cfg.stft_window, cfg.stft_hop);
    if echo.len() < n {
        return Err(PipelineError::TooShort {
            have: echo.len(),
            need: n,
        });
    }
    let frames = (echo.len() - n) / hop + 1;
    let bins = n / 2 + 1;
    let win = hann(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut magnitudes = vec![0.0; bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(echo.samples[t * hop + i] * win[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            magnitudes[f * frames + t] = buf[f].norm();
        }
    }
    Ok(Spectrogram {
        magnitudes,
        n_freq: bins,
        n_frames: frames,
        freq_resolution: f64::from(echo.sample_rate) / n as f64,
        time_resolution: hop,
    })
}

/// STFT magnitude, `log1p`, then min-max scaling to `[0, 1]` (all zeros if constant).
pub fn compute_spectrogram(echo: &FaceEcho, cfg: &PipelineConfig) -> Result<Spectrogram> {
    let mut s = stft_magnitude(&echo.echo, cfg)?;
    s.magnitudes.iter_mut().for_each(|m| *m = m.ln_1p());
    let (lo, hi) = s
        .magnitudes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| {
            (lo.min(m), hi.max(m))
        });
    let range = hi - lo;
    for m in &mut s.magnitudes {
        *m = if range > 0.0 { (*m - lo) / range } else { 0.0 };
    }
    Ok(s)
}

/// Every intermediate of one pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineTrace {
    pub filtered: Waveform,
    pub pilot_index: usize,
    pub clips: ChirpClipSet,
    pub residual: ChirpClipSet,
    pub location: EchoLocation,
    pub echo: FaceEcho,
    pub spectrogram: Spectrogram,
}

pub fn run_pipeline(rec: &Waveform, cfg: &PipelineConfig) -> Result<PipelineTrace> {
    cfg.validate()?;
    let filtered = highpass_filter(rec, cfg.highpass_cutoff)?;
    let pilot_index = locate_pilot(&filtered, cfg)?;
    let clips = segment_chirps(&filtered, pilot_index, cfg)?;
    let residual = remove_direct_path(&clips, cfg)?;
    let location = locate_face_echo_adaptive(&residual, cfg)?;
    let echo = extract_face_echoes(&residual, location.position, cfg)?;
    let spectrogram = compute_spectrogram(&echo, cfg)?;
    Ok(PipelineTrace {
        filtered,
        pilot_index,
        clips,
        residual,
        location,
        echo,
        spectrogram,
    })
}

/// Recording → normalized spectrogram.
pub fn preprocess(rec: &Waveform, cfg: &PipelineConfig) -> Result<Spectrogram> {
    run_pipeline(rec, cfg).map(|t| t.spectrogram)
}
