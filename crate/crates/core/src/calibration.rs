//! D extraction from fitted spectra, the linear D-T calibration and its
//! inversion for thermometry.
//!
//! Temperature moves every resonance in the same direction, while magnetic
//! field fluctuations move a Zeeman pair antisymmetrically about its
//! midpoint. Taking D as the midpoint of the outer resonance pair therefore
//! separates the temperature channel from the field channel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::FitResult;

/// Reference temperature of the calibration, Kelvin.
pub const T0_K: f64 = 298.0;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("fit did not converge")]
    FitNotConverged,
    #[error("fit resolved {found} peaks, need exactly {needed}")]
    InsufficientPeaks { needed: usize, found: usize },
    #[error("need at least {needed} calibration records, got {got}")]
    InsufficientRecords { needed: usize, got: usize },
    #[error("temperature span {span_k:.3} K below the required {required_k} K")]
    InsufficientSpan { span_k: f64, required_k: f64 },
    #[error("degenerate calibration: temperatures carry no spread")]
    DegenerateCalibration,
    #[error("calibration slope is zero; cannot invert for temperature")]
    NonInvertible,
    #[error("need at least 2 values, got {0}")]
    InsufficientData(usize),
    #[error("reference temperature {t_k} K outside the physical band 100-700 K")]
    UnphysicalTemperature { t_k: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    ZeroField,
    Zeeman,
}

/// Outer-pair and inner-pair midpoints disagreeing beyond the stated
/// tolerance; attached to the extraction instead of failing it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MidpointAsymmetry {
    pub outer_mid_hz: f64,
    pub inner_mid_hz: f64,
    pub tolerance_hz: f64,
}

/// D pulled out of one fitted spectrum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DExtraction {
    pub d_hz: f64,
    /// Propagated from the fit covariance of the contributing centers.
    pub sigma_d_hz: f64,
    pub mode: ExtractionMode,
    /// Fitted E in zero-field mode; the gamma_e*B_i half-splitting in Zeeman
    /// mode.
    pub e_or_bsplit_hz: f64,
    pub asymmetry: Option<MidpointAsymmetry>,
}

fn sorted_centers(fit: &FitResult) -> Vec<(f64, f64)> {
    let mut cs: Vec<(f64, f64)> = fit
        .model
        .peaks
        .iter()
        .enumerate()
        .map(|(k, p)| (p.center_hz, fit.center_sigma(k)))
        .collect();
    cs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    cs
}

/// D from a four-dip Zeeman spectrum: midpoint of the outer pair, which
/// belongs to the single [111]-aligned axis.
///
/// The inner-pair midpoint must agree within three combined standard
/// deviations; a discrepancy is attached as a warning rather than an error.
pub fn extract_d_zeeman(fit: &FitResult) -> Result<DExtraction, CalibrationError> {
    if !fit.converged {
        return Err(CalibrationError::FitNotConverged);
    }
    if fit.model.peaks.len() != 4 {
        return Err(CalibrationError::InsufficientPeaks {
            needed: 4,
            found: fit.model.peaks.len(),
        });
    }
    let cs = sorted_centers(fit);
    let (outer_lo, inner_lo, inner_hi, outer_hi) = (cs[0], cs[1], cs[2], cs[3]);

    let d = 0.5 * (outer_lo.0 + outer_hi.0);
    let sigma_d = 0.5 * (outer_lo.1.powi(2) + outer_hi.1.powi(2)).sqrt();
    let inner_mid = 0.5 * (inner_lo.0 + inner_hi.0);
    let sigma_inner = 0.5 * (inner_lo.1.powi(2) + inner_hi.1.powi(2)).sqrt();

    // floor keeps noiseless fits from tripping on rounding dust
    let tolerance = (3.0 * (sigma_d.powi(2) + sigma_inner.powi(2)).sqrt()).max(1e-9 * d);
    let asymmetry = if (inner_mid - d).abs() > tolerance {
        Some(MidpointAsymmetry {
            outer_mid_hz: d,
            inner_mid_hz: inner_mid,
            tolerance_hz: tolerance,
        })
    } else {
        None
    };

    Ok(DExtraction {
        d_hz: d,
        sigma_d_hz: sigma_d,
        mode: ExtractionMode::Zeeman,
        e_or_bsplit_hz: 0.5 * (outer_hi.0 - outer_lo.0),
        asymmetry,
    })
}

/// D from the strain-split zero-field doublet: midpoint of the two centers,
/// with the half-separation reported as the fitted E.
pub fn extract_d_zfs(fit: &FitResult) -> Result<DExtraction, CalibrationError> {
    if !fit.converged {
        return Err(CalibrationError::FitNotConverged);
    }
    if fit.model.peaks.len() != 2 {
        return Err(CalibrationError::InsufficientPeaks {
            needed: 2,
            found: fit.model.peaks.len(),
        });
    }
    let cs = sorted_centers(fit);
    Ok(DExtraction {
        d_hz: 0.5 * (cs[0].0 + cs[1].0),
        sigma_d_hz: 0.5 * (cs[0].1.powi(2) + cs[1].1.powi(2)).sqrt(),
        mode: ExtractionMode::ZeroField,
        e_or_bsplit_hz: 0.5 * (cs[1].0 - cs[0].0),
        asymmetry: None,
    })
}

/// One calibration point: reference thermometer reading plus the extracted D.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub t_ref_k: f64,
    pub extraction: DExtraction,
}

impl CalibrationRecord {
    pub fn new(t_ref_k: f64, extraction: DExtraction) -> Result<Self, CalibrationError> {
        if !(100.0..=700.0).contains(&t_ref_k) {
            return Err(CalibrationError::UnphysicalTemperature { t_k: t_ref_k });
        }
        Ok(CalibrationRecord { t_ref_k, extraction })
    }
}

/// Linear D(T) model anchored at [`T0_K`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFit {
    /// dD/dT, signed, Hz/K.
    pub slope_hz_per_k: f64,
    /// D at the reference temperature, Hz.
    pub intercept_hz: f64,
    pub t0_k: f64,
    pub residual_std_hz: f64,
    pub residuals_hz: Vec<f64>,
}

impl CalibrationFit {
    pub fn d_at(&self, t_k: f64) -> f64 {
        self.intercept_hz + self.slope_hz_per_k * (t_k - self.t0_k)
    }
}

/// Weighted linear least squares of D against T, weights 1/sigma_D^2.
///
/// Falls back to unit weights when any record reports sigma_D = 0 (a
/// noiseless synthesis would otherwise carry infinite weight).
pub fn fit_dt(records: &[CalibrationRecord]) -> Result<CalibrationFit, CalibrationError> {
    if records.len() < 3 {
        return Err(CalibrationError::InsufficientRecords {
            needed: 3,
            got: records.len(),
        });
    }
    for r in records {
        if !(100.0..=700.0).contains(&r.t_ref_k) {
            return Err(CalibrationError::UnphysicalTemperature { t_k: r.t_ref_k });
        }
    }
    let t_min = records.iter().map(|r| r.t_ref_k).fold(f64::INFINITY, f64::min);
    let t_max = records.iter().map(|r| r.t_ref_k).fold(f64::NEG_INFINITY, f64::max);
    if t_max - t_min < 1e-9 {
        return Err(CalibrationError::DegenerateCalibration);
    }
    if t_max - t_min < 10.0 {
        return Err(CalibrationError::InsufficientSpan {
            span_k: t_max - t_min,
            required_k: 10.0,
        });
    }

    let unit_weights = records.iter().any(|r| r.extraction.sigma_d_hz == 0.0);
    let weights: Vec<f64> = records
        .iter()
        .map(|r| {
            if unit_weights {
                1.0
            } else {
                1.0 / (r.extraction.sigma_d_hz * r.extraction.sigma_d_hz)
            }
        })
        .collect();

    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (r, &w) in records.iter().zip(&weights) {
        let x = r.t_ref_k - T0_K;
        let y = r.extraction.d_hz;
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let denom = sw * sxx - sx * sx;
    if !(denom > 1e-12 * sw * sxx) {
        return Err(CalibrationError::DegenerateCalibration);
    }
    let slope = (sw * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / sw;

    let residuals: Vec<f64> = records
        .iter()
        .map(|r| r.extraction.d_hz - (intercept + slope * (r.t_ref_k - T0_K)))
        .collect();
    let dof = (records.len() - 2) as f64;
    let residual_std = (residuals.iter().map(|r| r * r).sum::<f64>() / dof).sqrt();

    Ok(CalibrationFit {
        slope_hz_per_k: slope,
        intercept_hz: intercept,
        t0_k: T0_K,
        residual_std_hz: residual_std,
        residuals_hz: residuals,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TemperatureEstimate {
    pub t_k: f64,
    pub sigma_t_k: f64,
}

/// Inverts the calibration: `T = T0 + (D - intercept)/slope`, with the
/// uncertainty mapped through the slope magnitude.
pub fn temperature_from_d(
    d_hz: f64,
    sigma_d_hz: f64,
    cal: &CalibrationFit,
) -> Result<TemperatureEstimate, CalibrationError> {
    if cal.slope_hz_per_k == 0.0 {
        return Err(CalibrationError::NonInvertible);
    }
    Ok(TemperatureEstimate {
        t_k: cal.t0_k + (d_hz - cal.intercept_hz) / cal.slope_hz_per_k,
        sigma_t_k: sigma_d_hz / cal.slope_hz_per_k.abs(),
    })
}

/// Sample standard deviation (n-1 denominator) of repeated D values.
pub fn repeatability_std(values: &[f64]) -> Result<f64, CalibrationError> {
    if values.len() < 2 {
        return Err(CalibrationError::InsufficientData(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    Ok((ss / (n - 1.0)).sqrt())
}
