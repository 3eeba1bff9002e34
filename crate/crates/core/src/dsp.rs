//! Small spectral helpers shared by the simulator, the pipeline and the tests.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Linear-phase FIR applied with its group delay removed: `y[n] = Σ h[k]·x[n + c − k]`,
/// `c = (len − 1) / 2`, samples outside `x` taken as zero. Output has the input's length.
pub fn fir_filter_centered(x: &[f64], h: &[f64]) -> Vec<f64> {
    let c = (h.len().saturating_sub(1) / 2) as isize;
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            // k ranges so that 0 ≤ i + c − k < n
            let k_lo = (i + c - n + 1).max(0) as usize;
            let k_hi = ((i + c).min(h.len() as isize - 1)) as usize;
            if k_lo > k_hi {
                return 0.0;
            }
            let base = (i + c) as usize;
            h[k_lo..=k_hi]
                .iter()
                .enumerate()
                .map(|(j, hk)| hk * x[base - (k_lo + j)])
                .sum()
        })
        .collect()
}

/// Full complex spectrum of a real signal.
pub fn spectrum(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new()
            .plan_fft_forward(buf.len())
            .process(&mut buf);
    }
    buf
}

/// One-sided power spectrum `|X[k]|²`, `k = 0..=n/2`.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let spec = spectrum(x);
    spec[..x.len() / 2 + 1]
        .iter()
        .map(|c| c.norm_sqr())
        .collect()
}

pub fn bin_frequency(bin: usize, n: usize, sample_rate: f64) -> f64 {
    bin as f64 * sample_rate / n as f64
}

/// Fraction of one-sided spectral energy with frequency in `[lo, hi]`.
pub fn band_energy_fraction(x: &[f64], sample_rate: f64, lo: f64, hi: f64) -> f64 {
    let p = power_spectrum(x);
    let total: f64 = p.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = p
        .iter()
        .enumerate()
        .filter(|(k, _)| (lo..=hi).contains(&bin_frequency(*k, x.len(), sample_rate)))
        .map(|(_, v)| v)
        .sum();
    inside / total
}

/// Zero every spectral component outside `[lo, hi]` Hz and return the real signal.
pub fn band_limit(x: &[f64], sample_rate: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut spec = spectrum(x);
    for (k, c) in spec.iter_mut().enumerate() {
        let f = bin_frequency(k.min(n - k), n, sample_rate);
        if !(lo..=hi).contains(&f) {
            *c = Complex::new(0.0, 0.0);
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    spec.iter().map(|c| c.re / n as f64).collect()
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}
