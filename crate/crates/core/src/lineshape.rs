//! CW-ODMR spectrum synthesis: Lorentzian dips on a unit fluorescence
//! baseline, with seeded additive Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spin::{self, NVAxisSet, SpinError, SpinParams};

#[derive(Debug, Error)]
pub enum LineshapeError {
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error("invalid peak: {0}")]
    InvalidPeak(String),
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("noise sigma must be >= 0, got {0}")]
    InvalidNoise(f64),
    #[error("total dip contrast reaches {total:.4} >= 1 at {freq_hz} Hz; signal would be nonpositive")]
    ContrastOverflow { freq_hz: f64, total: f64 },
    #[error("bias field misaligned with axis 1 by {angle_rad:.3e} rad (tolerance 1e-6)")]
    MisalignedField { angle_rad: f64 },
    #[error("field is nonzero (|B| = {b_mag_t} T); use the Zeeman-mode synthesis")]
    InvalidMode { b_mag_t: f64 },
}

/// One Lorentzian dip: full width at half maximum and fractional depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianPeak {
    pub center_hz: f64,
    pub fwhm_hz: f64,
    pub contrast: f64,
}

impl LorentzianPeak {
    pub fn new(center_hz: f64, fwhm_hz: f64, contrast: f64) -> Result<Self, LineshapeError> {
        let p = LorentzianPeak {
            center_hz,
            fwhm_hz,
            contrast,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LineshapeError> {
        if !(self.fwhm_hz > 0.0) {
            return Err(LineshapeError::InvalidPeak(format!(
                "fwhm must be > 0, got {}",
                self.fwhm_hz
            )));
        }
        if !(self.contrast > 0.0 && self.contrast < 1.0) {
            return Err(LineshapeError::InvalidPeak(format!(
                "contrast must be in (0,1), got {}",
                self.contrast
            )));
        }
        if !self.center_hz.is_finite() {
            return Err(LineshapeError::InvalidPeak("non-finite center".into()));
        }
        Ok(())
    }

    /// Dip depth at frequency `f`, in (0, contrast].
    pub fn depth_at(&self, f_hz: f64) -> f64 {
        let half = 0.5 * self.fwhm_hz;
        let u = f_hz - self.center_hz;
        self.contrast * half * half / (u * u + half * half)
    }
}

/// A sampled spectrum: strictly increasing frequency grid and normalized
/// fluorescence (baseline ~ 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    freqs_hz: Vec<f64>,
    signal: Vec<f64>,
}

impl Spectrum {
    pub fn new(freqs_hz: Vec<f64>, signal: Vec<f64>) -> Result<Self, LineshapeError> {
        if freqs_hz.len() != signal.len() {
            return Err(LineshapeError::InvalidGrid(format!(
                "{} frequencies vs {} samples",
                freqs_hz.len(),
                signal.len()
            )));
        }
        if freqs_hz.len() < 2 {
            return Err(LineshapeError::InvalidGrid("needs at least 2 points".into()));
        }
        for w in freqs_hz.windows(2) {
            if !(w[1] > w[0]) {
                return Err(LineshapeError::InvalidGrid(format!(
                    "frequencies not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Spectrum { freqs_hz, signal })
    }

    pub fn freqs_hz(&self) -> &[f64] {
        &self.freqs_hz
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub fn len(&self) -> usize {
        self.freqs_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs_hz.is_empty()
    }

    /// Mean spacing of the (possibly non-uniform) grid.
    pub fn mean_step_hz(&self) -> f64 {
        (self.freqs_hz[self.freqs_hz.len() - 1] - self.freqs_hz[0])
            / (self.freqs_hz.len() - 1) as f64
    }
}

/// Uniform grid of `points` frequencies covering `center ± span/2`.
pub fn frequency_grid(center_hz: f64, span_hz: f64, points: usize) -> Vec<f64> {
    let lo = center_hz - 0.5 * span_hz;
    let step = span_hz / (points - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Default acquisition window: 601 points covering D ± 250 MHz.
pub fn default_grid(d_hz: f64) -> Vec<f64> {
    frequency_grid(d_hz, 500e6, 601)
}

/// Sum-of-dips synthesis on a unit baseline.
///
/// `signal(f) = 1 - sum_k depth_k(f) + N(0, noise_sigma)`, reproducible for a
/// given seed. Fails if the summed dips reach 1 anywhere on the grid.
pub fn synthesize(
    peaks: &[LorentzianPeak],
    freqs_hz: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Spectrum, LineshapeError> {
    for p in peaks {
        p.validate()?;
    }
    if noise_sigma < 0.0 {
        return Err(LineshapeError::InvalidNoise(noise_sigma));
    }

    let mut signal = Vec::with_capacity(freqs_hz.len());
    for &f in freqs_hz {
        let total: f64 = peaks.iter().map(|p| p.depth_at(f)).sum();
        if total >= 1.0 {
            return Err(LineshapeError::ContrastOverflow { freq_hz: f, total });
        }
        signal.push(1.0 - total);
    }

    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("sigma checked nonnegative");
        for s in &mut signal {
            *s += normal.sample(&mut rng);
        }
    }

    Spectrum::new(freqs_hz.to_vec(), signal)
}

/// Zeeman-mode spectrum: bias field along axis 1 ([111]), eight transition
/// peaks from the four orientations.
///
/// Each orientation holds 1/4 of the ensemble and splits its contrast between
/// its two transitions, so a resolved single-axis dip is
/// `per_axis_contrast/2` deep, the triply-degenerate inner dips are
/// `3/2 * per_axis_contrast`, and at B = 0 everything collapses into one dip
/// of `4 * per_axis_contrast`.
pub fn zeeman_spectrum(
    params: &SpinParams,
    axes: &NVAxisSet,
    fwhm_hz: f64,
    per_axis_contrast: f64,
    freqs_hz: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Spectrum, LineshapeError> {
    params.validate()?;
    let b_mag = spin::norm(params.b_t);
    if b_mag > 0.0 {
        let a1 = axes.axis(1)?;
        let cross = [
            params.b_t[1] * a1[2] - params.b_t[2] * a1[1],
            params.b_t[2] * a1[0] - params.b_t[0] * a1[2],
            params.b_t[0] * a1[1] - params.b_t[1] * a1[0],
        ];
        let sin_angle = spin::norm(cross) / b_mag;
        // reversed field also counts as misaligned
        if sin_angle > 1e-6 || spin::dot(params.b_t, a1) < 0.0 {
            return Err(LineshapeError::MisalignedField {
                angle_rad: sin_angle.clamp(-1.0, 1.0).asin(),
            });
        }
    }
    if !params.zeeman_regime_ok() {
        return Err(SpinError::RegimeViolation {
            ratio: params.regime_ratio(),
        }
        .into());
    }

    let pairs = spin::approx_transitions_all(params, axes)?;
    let per_peak = per_axis_contrast / 2.0;
    let mut peaks = Vec::with_capacity(8);
    for pair in &pairs {
        peaks.push(LorentzianPeak::new(pair.f_minus_hz, fwhm_hz, per_peak)?);
        peaks.push(LorentzianPeak::new(pair.f_plus_hz, fwhm_hz, per_peak)?);
    }
    synthesize(&peaks, freqs_hz, noise_sigma, seed)
}

/// Zero-field spectrum: the strain-split pair at D ± E, each dip with the
/// given contrast. Rejects nonzero fields.
pub fn zero_field_spectrum(
    params: &SpinParams,
    fwhm_hz: f64,
    contrast: f64,
    freqs_hz: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Spectrum, LineshapeError> {
    params.validate()?;
    let b_mag = spin::norm(params.b_t);
    if b_mag != 0.0 {
        return Err(LineshapeError::InvalidMode { b_mag_t: b_mag });
    }
    let peaks = [
        LorentzianPeak::new(params.d_hz - params.e_hz, fwhm_hz, contrast)?,
        LorentzianPeak::new(params.d_hz + params.e_hz, fwhm_hz, contrast)?,
    ];
    synthesize(&peaks, freqs_hz, noise_sigma, seed)
}
