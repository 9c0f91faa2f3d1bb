//! From voltage noise to temperature sensitivity.
//!
//! The measurement model parks the microwave frequency on the steepest flank
//! of the fitted resonance and logs the fluorescence voltage. Voltage noise
//! then maps to frequency through the scale factor (V/Hz) and to temperature
//! through dD/dT, giving `eta(f) = sqrt(PSD(f)) / (scale * |dD/dT|)` in
//! K/sqrt(Hz).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::FitModel;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("model has no peaks")]
    EmptyModel,
    #[error("model slope is identically zero")]
    ZeroSlope,
    #[error("volts-per-unit must be > 0, got {0}")]
    InvalidVolts(f64),
    #[error("invalid time series: {0}")]
    InvalidTimeSeries(String),
    #[error("segment length {len} invalid (need 8 <= len <= {max})")]
    InvalidSegment { len: usize, max: usize },
    #[error("overlap {0} outside [0, 1)")]
    InvalidOverlap(f64),
    #[error("dD/dT must be nonzero")]
    ZeroDddt,
    #[error("no PSD bins in (0, {cutoff_hz}] Hz")]
    EmptyBand { cutoff_hz: f64 },
}

/// Fluorescence voltage log at a fixed microwave frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub sample_rate_hz: f64,
    pub samples_v: Vec<f64>,
}

impl TimeSeries {
    pub fn new(sample_rate_hz: f64, samples_v: Vec<f64>) -> Result<Self, SensitivityError> {
        if !(sample_rate_hz > 0.0) {
            return Err(SensitivityError::InvalidTimeSeries(format!(
                "sample rate must be > 0, got {sample_rate_hz}"
            )));
        }
        if samples_v.len() < 2 {
            return Err(SensitivityError::InvalidTimeSeries(format!(
                "need at least 2 samples, got {}",
                samples_v.len()
            )));
        }
        if samples_v.iter().any(|v| !v.is_finite()) {
            return Err(SensitivityError::InvalidTimeSeries(
                "non-finite sample".into(),
            ));
        }
        Ok(TimeSeries {
            sample_rate_hz,
            samples_v,
        })
    }
}

/// Steepest slope of the fitted line, converted to V/Hz.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScaleFactor {
    pub slope_v_per_hz: f64,
    /// Frequency at which the maximum slope occurs.
    pub park_freq_hz: f64,
}

/// One-sided power spectral density, V^2/Hz.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub freqs_hz: Vec<f64>,
    pub density_v2_per_hz: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub freqs_hz: Vec<f64>,
    pub eta_k_per_sqrt_hz: Vec<f64>,
    pub avg_below_1hz: f64,
    pub avg_below_10hz: f64,
}

/// Locates the largest |dS/df| of the model by dense scan plus golden-section
/// refinement.
///
/// For an isolated Lorentzian the exact answer is
/// `(3*sqrt(3)/4) * C/fwhm * volts_per_unit` at `center ± fwhm/(2*sqrt(3))`.
pub fn scale_factor(model: &FitModel, volts_per_unit: f64) -> Result<ScaleFactor, SensitivityError> {
    if model.peaks.is_empty() {
        return Err(SensitivityError::EmptyModel);
    }
    if !(volts_per_unit > 0.0) {
        return Err(SensitivityError::InvalidVolts(volts_per_unit));
    }

    let lo = model
        .peaks
        .iter()
        .map(|p| p.center_hz - 3.0 * p.fwhm_hz)
        .fold(f64::INFINITY, f64::min);
    let hi = model
        .peaks
        .iter()
        .map(|p| p.center_hz + 3.0 * p.fwhm_hz)
        .fold(f64::NEG_INFINITY, f64::max);

    const SCAN: usize = 4001;
    let step = (hi - lo) / (SCAN - 1) as f64;
    let mut best_f = lo;
    let mut best = 0.0f64;
    for i in 0..SCAN {
        let f = lo + step * i as f64;
        let s = model.derivative(f).abs();
        if s > best {
            best = s;
            best_f = f;
        }
    }
    if best == 0.0 {
        return Err(SensitivityError::ZeroSlope);
    }

    // golden-section maximization of |S'| around the scan winner
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (best_f - step, best_f + step);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = model.derivative(x1).abs();
    let mut f2 = model.derivative(x2).abs();
    for _ in 0..120 {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = model.derivative(x1).abs();
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = model.derivative(x2).abs();
        }
    }
    let park = 0.5 * (a + b);
    let slope = model.derivative(park).abs() * volts_per_unit;
    if !(slope > 0.0) {
        return Err(SensitivityError::ZeroSlope);
    }
    Ok(ScaleFactor {
        slope_v_per_hz: slope,
        park_freq_hz: park,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    fn coefficients(self, n: usize) -> Vec<f64> {
        let tau = std::f64::consts::TAU;
        (0..n)
            .map(|i| {
                let x = i as f64 / n as f64;
                match self {
                    Window::Hann => 0.5 * (1.0 - (tau * x).cos()),
                    Window::Hamming => 0.54 - 0.46 * (tau * x).cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

/// Welch estimator settings. With `segment_len` unset the series is cut into
/// roughly eight segments at the configured overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WelchConfig {
    pub segment_len: Option<usize>,
    pub overlap: f64,
    pub window: Window,
}

impl Default for WelchConfig {
    fn default() -> Self {
        WelchConfig {
            segment_len: None,
            overlap: 0.5,
            window: Window::Hann,
        }
    }
}

/// Averaged windowed periodograms, one-sided and window-power normalized:
/// white noise of variance sigma^2 comes out flat at `2*sigma^2/sample_rate`.
pub fn welch_psd(ts: &TimeSeries, cfg: &WelchConfig) -> Result<PsdEstimate, SensitivityError> {
    if !(ts.sample_rate_hz > 0.0) || ts.samples_v.len() < 2 {
        return Err(SensitivityError::InvalidTimeSeries(
            "empty or rate-less series".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(SensitivityError::InvalidOverlap(cfg.overlap));
    }
    let len = ts.samples_v.len();
    let seg = match cfg.segment_len {
        Some(s) => s,
        None => {
            // eight segments at the configured overlap
            let denom = 1.0 + 7.0 * (1.0 - cfg.overlap);
            ((len as f64 / denom).floor() as usize).clamp(8, len)
        }
    };
    if seg < 8 || seg > len {
        return Err(SensitivityError::InvalidSegment { len: seg, max: len });
    }

    let step = ((seg as f64) * (1.0 - cfg.overlap)).round().max(1.0) as usize;
    let n_segments = (len - seg) / step + 1;

    let window = cfg.window.coefficients(seg);
    let window_power: f64 = window.iter().map(|w| w * w).sum();

    let fft = FftPlanner::new().plan_fft_forward(seg);
    let n_bins = seg / 2 + 1;
    let mut accum = vec![0.0f64; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); seg];
    for s in 0..n_segments {
        let offset = s * step;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(ts.samples_v[offset + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, a) in accum.iter_mut().enumerate() {
            *a += buf[k].norm_sqr();
        }
    }

    let norm = 1.0 / (n_segments as f64 * ts.sample_rate_hz * window_power);
    let nyquist_bin = if seg % 2 == 0 { Some(n_bins - 1) } else { None };
    let density: Vec<f64> = accum
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let one_sided = if k == 0 || Some(k) == nyquist_bin { 1.0 } else { 2.0 };
            one_sided * a * norm
        })
        .collect();
    let freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * ts.sample_rate_hz / seg as f64)
        .collect();

    Ok(PsdEstimate {
        freqs_hz: freqs,
        density_v2_per_hz: density,
    })
}

/// Converts a voltage PSD into the sensitivity spectrum and its band
/// averages below 1 Hz and 10 Hz (DC bin excluded).
pub fn sensitivity_spectrum(
    psd: &PsdEstimate,
    sf: &ScaleFactor,
    dddt_hz_per_k: f64,
) -> Result<SensitivityReport, SensitivityError> {
    if dddt_hz_per_k == 0.0 {
        return Err(SensitivityError::ZeroDddt);
    }
    if !(sf.slope_v_per_hz > 0.0) {
        return Err(SensitivityError::ZeroSlope);
    }
    let conv = 1.0 / (sf.slope_v_per_hz * dddt_hz_per_k.abs());
    let eta: Vec<f64> = psd
        .density_v2_per_hz
        .iter()
        .map(|&d| d.max(0.0).sqrt() * conv)
        .collect();

    let band_avg = |cutoff: f64| -> Result<f64, SensitivityError> {
        let vals: Vec<f64> = psd
            .freqs_hz
            .iter()
            .zip(&eta)
            .filter(|(&f, _)| f > 0.0 && f <= cutoff)
            .map(|(_, &e)| e)
            .collect();
        if vals.is_empty() {
            return Err(SensitivityError::EmptyBand { cutoff_hz: cutoff });
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };

    let avg_below_1hz = band_avg(1.0)?;
    let avg_below_10hz = band_avg(10.0)?;
    Ok(SensitivityReport {
        freqs_hz: psd.freqs_hz.clone(),
        eta_k_per_sqrt_hz: eta,
        avg_below_1hz,
        avg_below_10hz,
    })
}
