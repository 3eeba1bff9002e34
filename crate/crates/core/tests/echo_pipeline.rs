use m3fas_core::channel::{
    simulate_recording, DeviceResponse, ScenarioRanges, SurfaceKind, SurfaceModel,
};
use m3fas_core::dsp::{power_spectrum, rms};
use m3fas_core::echo::*;
use m3fas_core::signal::{assemble_probe_signal, ProbeSignalConfig, Waveform};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: u32 = 44_100;

fn tone(freq: f64, len: usize) -> Waveform {
    Waveform::new(
        (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / f64::from(FS)).sin())
            .collect(),
        FS,
    )
}

fn setup() -> (Waveform, PipelineConfig) {
    let probe_cfg = ProbeSignalConfig::default();
    (
        assemble_probe_signal(&probe_cfg).unwrap(),
        PipelineConfig::from_probe(&probe_cfg).unwrap(),
    )
}

/// Seeded scenario alternating live faces and flat attacks on a random device.
fn scenario_recording(probe: &Waveform, seed: u64, snr: Option<f64>) -> (Waveform, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = if seed.is_multiple_of(2) {
        SurfaceKind::LiveFace
    } else {
        SurfaceKind::PrintAttack
    };
    let surface = SurfaceModel::sample(kind, &mut rng);
    let device = DeviceResponse::random(rng.random());
    let scenario = ScenarioRanges::default().sample(&surface, snr, device, &mut rng);
    let rec = simulate_recording(probe, &scenario, rng.random()).unwrap();
    (rec, scenario.direct_path_delay, scenario.face_echo_delay)
}

#[test]
fn highpass_rejects_5k_and_passes_15k() {
    let n = 8192;
    for (f, check) in [(5_000.0, 0), (15_000.0, 1)] {
        let x = tone(f, n);
        let y = highpass_filter(&x, 10_000.0).unwrap();
        // ignore the filter's edge transients
        let (xr, yr) = (rms(&x.samples[300..n - 300]), rms(&y.samples[300..n - 300]));
        if check == 0 {
            assert!(yr <= 0.01 * xr, "{f} Hz: {yr} vs {xr}");
        } else {
            assert!((yr / xr - 1.0).abs() <= 0.12, "{f} Hz: {yr} vs {xr}");
        }
    }
}

#[test]
fn highpass_frequency_response_meets_band_edges() {
    let h = design_highpass(10_000.0, FS, HIGHPASS_TAPS).unwrap();
    let n = 1 << 15;
    let mut padded = h.clone();
    padded.resize(n, 0.0);
    let p = power_spectrum(&padded);
    let db = |k: usize| 10.0 * p[k].log10();
    let bin = |f: f64| (f * n as f64 / f64::from(FS)).round() as usize;
    let worst_stop = (0..=bin(8_000.0)).map(db).fold(f64::NEG_INFINITY, f64::max);
    assert!(worst_stop <= -40.0, "stopband {worst_stop} dB");
    let pass: Vec<f64> = (bin(12_000.0)..=n / 2).map(db).collect();
    let (lo, hi) = pass
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    assert!(hi <= 1.0 && lo >= -1.0, "passband {lo}..{hi} dB");
}

#[test]
fn cross_correlate_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(1..300);
        let m = rng.random_range(1..=n);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = cross_correlate(&s, &t).unwrap();
        assert_eq!(fast.len(), n - m + 1);
        for (i, v) in fast.iter().enumerate() {
            let mut brute = 0.0;
            for j in 0..m {
                brute += s[i + j] * t[j];
            }
            assert!((v - brute).abs() <= 1e-9);
        }
    }
}

#[test]
fn pilot_is_found_at_the_direct_path_delay() {
    let (probe, cfg) = setup();
    for seed in 0..20 {
        let (rec, d0, _) = scenario_recording(&probe, seed, None);
        let filtered = highpass_filter(&rec, 10_000.0).unwrap();
        assert_eq!(locate_pilot(&filtered, &cfg).unwrap(), d0);
    }
}

#[test]
fn pilot_at_10db_within_two_samples() {
    let (probe, cfg) = setup();
    let trials = 200;
    let hits = (0..trials)
        .filter(|&seed| {
            let (rec, d0, _) = scenario_recording(&probe, 10_000 + seed, Some(10.0));
            let filtered = highpass_filter(&rec, 10_000.0).unwrap();
            locate_pilot(&filtered, &cfg).is_ok_and(|p| p.abs_diff(d0) <= 2)
        })
        .count();
    assert!(hits as f64 >= 0.95 * trials as f64, "{hits}/{trials}");
}

#[test]
fn segmentation_follows_the_emitted_layout() {
    let (probe, cfg) = setup();
    let mut rec = vec![0.0; 300];
    rec.extend_from_slice(&probe.samples);
    rec.resize(rec.len() + 1000, 0.0);
    let rec = Waveform::new(rec, FS);
    let set = segment_chirps(&rec, 300, &cfg).unwrap();
    assert_eq!(set.clips.len(), 9);
    let chirp_len = cfg.chirp_templates[0].len();
    for (k, w) in set.onsets.windows(2).enumerate() {
        assert_eq!(w[1] - w[0], 3000 + chirp_len, "pair {k}");
    }
    for (clip, template) in set.clips.iter().zip(&cfg.chirp_templates) {
        assert_eq!(&clip.samples[..template.len()], &template.samples[..]);
    }
    let overrun = rec.len() - cfg.layout_len() + 1;
    assert!(matches!(
        segment_chirps(&rec, overrun, &cfg),
        Err(PipelineError::OutOfBounds { .. })
    ));
}

fn clip_set(
    cfg: &PipelineConfig,
    mut build: impl FnMut(usize, &Waveform) -> Vec<f64>,
) -> ChirpClipSet {
    ChirpClipSet {
        clips: cfg
            .chirp_templates
            .iter()
            .enumerate()
            .map(|(k, t)| Waveform::new(build(k, t), FS))
            .collect(),
        onsets: (0..9).map(|k| k * 10_000).collect(),
    }
}

#[test]
fn direct_path_removal_exposes_the_face_echo() {
    let (_, cfg) = setup();
    let face = 90;
    let clips = clip_set(&cfg, |k, t| {
        let mut c = vec![0.0; cfg.clip_len(k)];
        for (i, s) in t.samples.iter().enumerate() {
            c[i] += s;
            c[face + i] += 0.3 * s;
        }
        c
    });
    let residual = remove_direct_path(&clips, &cfg).unwrap();
    for (clip, t) in residual.clips.iter().zip(&cfg.chirp_templates) {
        let corr = cross_correlate(&clip.samples, &t.samples).unwrap();
        assert_eq!(argmax(&corr), Some(face));
    }

    let only_direct = clip_set(&cfg, |k, t| {
        let mut c = vec![0.0; cfg.clip_len(k)];
        c[..t.len()].copy_from_slice(&t.samples);
        c
    });
    let residual = remove_direct_path(&only_direct, &cfg).unwrap();
    for (before, after) in only_direct.clips.iter().zip(&residual.clips) {
        assert!(after.energy() <= 0.05 * before.energy());
    }
}

#[test]
fn identical_echoes_give_zero_std() {
    let (_, cfg) = setup();
    let clips = clip_set(&cfg, |k, t| {
        let mut c = vec![0.0; cfg.clip_len(k)];
        for (i, s) in t.samples.iter().enumerate() {
            c[30 + i] += s;
        }
        c
    });
    let loc = locate_face_echo_adaptive(&clips, &cfg).unwrap();
    assert_eq!(loc.position, 30);
    assert_eq!(loc.std, 0.0);
    // tie-break: the first zero-std window is the earliest one containing 30
    assert_eq!(loc.window, 0);
    let first_zero = loc
        .history
        .iter()
        .position(|h| h.eligible && h.std == 0.0)
        .unwrap();
    assert_eq!(loc.window, loc.history[first_zero].start);
}

#[test]
fn one_noisy_clip_is_outvoted() {
    let (_, cfg) = setup();
    let mut hits = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = rng.random_range(60..200);
        let noisy = rng.random_range(0..9);
        let clips = clip_set(&cfg, |k, t| {
            let mut c = vec![0.0; cfg.clip_len(k)];
            for (i, s) in t.samples.iter().enumerate() {
                c[truth + i] += 0.3 * s;
            }
            if k == noisy {
                c.iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.05..0.05));
            }
            c
        });
        let loc = locate_face_echo_adaptive(&clips, &cfg).unwrap();
        hits += usize::from(loc.position.abs_diff(truth) <= 1);
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn extraction_is_ordered_and_bounded() {
    let (_, cfg) = setup();
    let clips = clip_set(&cfg, |k, _| vec![k as f64; cfg.clip_len(k)]);
    let echo = extract_face_echoes(&clips, 5, &cfg).unwrap();
    assert_eq!(echo.echo.len(), 540);
    for (k, chunk) in echo.echo.samples.chunks(60).enumerate() {
        assert!(chunk.iter().all(|&v| v == k as f64));
    }
    let last = cfg.clip_len(0) - 1;
    assert!(extract_face_echoes(&clips, last - 59, &cfg).is_ok());
    assert!(matches!(
        extract_face_echoes(&clips, last - 58, &cfg),
        Err(PipelineError::OutOfBounds { .. })
    ));
}

#[test]
fn stft_localizes_a_14k_tone() {
    let (_, cfg) = setup();
    let echo = tone(14_000.0, 540);
    let raw = stft_magnitude(&echo, &cfg).unwrap();
    assert_eq!((raw.n_freq, raw.n_frames), (33, 30));
    let k0 = (14_000.0 / raw.freq_resolution).round() as usize;
    let energy = |f: usize| (0..raw.n_frames).map(|t| raw.at(f, t).powi(2)).sum::<f64>();
    let total: f64 = (0..raw.n_freq).map(energy).sum();
    let band: f64 = (k0 - 1..=k0 + 1).map(energy).sum();
    assert!(band >= 0.8 * total, "{}", band / total);

    let spec = compute_spectrogram(&FaceEcho { echo, position: 0 }, &cfg).unwrap();
    assert!(spec.magnitudes.iter().all(|m| (0.0..=1.0).contains(m)));
    let peak_row = (0..spec.n_freq)
        .max_by(|&a, &b| spec.at(a, 10).total_cmp(&spec.at(b, 10)))
        .unwrap();
    assert!(peak_row.abs_diff(k0) <= 1);
}

#[test]
fn noise_free_end_to_end_recovers_face_position() {
    let (probe, cfg) = setup();
    let n = 200usize;
    let hits = (0..n as u64)
        .filter(|&seed| {
            let (rec, _, fd) = scenario_recording(&probe, seed, None);
            run_pipeline(&rec, &cfg).is_ok_and(|t| t.location.position == fd)
        })
        .count();
    assert!(hits * 100 >= 99 * n, "{hits}/{n}");
}

#[test]
fn pipeline_is_deterministic_and_min_std_is_optimal() {
    let (probe, cfg) = setup();
    let (rec, _, _) = scenario_recording(&probe, 4, Some(20.0));
    let a = run_pipeline(&rec, &cfg).unwrap();
    let b = run_pipeline(&rec, &cfg).unwrap();
    assert_eq!(a, b);
    let chosen = a.location.std;
    for h in a.location.history.iter().filter(|h| h.eligible) {
        assert!(h.std >= chosen);
    }
}

#[test]
fn recording_without_pilot_is_rejected() {
    let (probe, cfg) = setup();
    let mut samples = probe.samples.clone();
    samples[..cfg.pilot_template.len()].fill(0.0);
    samples.resize(samples.len() + 2000, 0.0);
    let err = preprocess(&Waveform::new(samples, FS), &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::NoPilot(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn translation_equivariance(seed in 0u64..1000, k in 0usize..400) {
        let (probe, cfg) = setup();
        let (rec, _, _) = scenario_recording(&probe, seed, None);
        let mut shifted = vec![0.0; k];
        shifted.extend_from_slice(&rec.samples);
        let a = run_pipeline(&rec, &cfg).unwrap();
        let b = run_pipeline(&Waveform::new(shifted, FS), &cfg).unwrap();
        prop_assert_eq!(b.pilot_index, a.pilot_index + k);
        prop_assert_eq!(b.location.position, a.location.position);
        for (x, y) in a.echo.echo.samples.iter().zip(&b.echo.echo.samples) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn amplitude_invariance(seed in 0u64..1000, c in 0.01f64..20.0) {
        let (probe, cfg) = setup();
        let (rec, _, _) = scenario_recording(&probe, seed, None);
        let a = run_pipeline(&rec, &cfg).unwrap();
        let b = run_pipeline(&rec.scaled(c), &cfg).unwrap();
        prop_assert_eq!(b.pilot_index, a.pilot_index);
        prop_assert_eq!(b.location.position, a.location.position);
        let (ra, rb) = (stft_magnitude(&a.echo.echo, &cfg).unwrap(), stft_magnitude(&b.echo.echo, &cfg).unwrap());
        for (x, y) in ra.magnitudes.iter().zip(&rb.magnitudes) {
            prop_assert!((c * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }
}
