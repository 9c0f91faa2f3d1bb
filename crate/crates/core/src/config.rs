//! Run configuration: flat `key=value` text with dotted section keys.
//!
//! Example:
//!
//! ```text
//! mode=zeeman
//! spin.d0_hz=2.87e9
//! spin.b_mag_t=5e-3
//! temps_k=298,303,308,313,318,323
//! noise.sigma=1e-3
//! repeats=100
//! seed=1
//! ```
//!
//! Unknown keys are rejected and every module precondition is checked at
//! load time, so a bad configuration fails before any work starts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::T0_K;
use crate::fitting::FitOptions;
use crate::lineshape::frequency_grid;
use crate::sensitivity::{WelchConfig, Window};
use crate::spin::{NVAxisSet, SpinParams, GAMMA_E_HZ_PER_T};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("key '{key}': {message}")]
    Field { key: String, message: String },
}

fn field_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Zfs,
    Zeeman,
}

impl Mode {
    pub fn n_peaks(self) -> usize {
        match self {
            Mode::Zfs => 2,
            Mode::Zeeman => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Zfs => "zfs",
            Mode::Zeeman => "zeeman",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zfs" => Ok(Mode::Zfs),
            "zeeman" => Ok(Mode::Zeeman),
            other => Err(format!("unknown mode {other:?} (expected zfs|zeeman)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpinConfig {
    /// Axial zero-field splitting at the reference temperature, Hz.
    pub d0_hz: f64,
    pub e_hz: f64,
    pub gamma_e_hz_per_t: f64,
    /// Bias field magnitude along the [111] axis, Tesla. Zero in ZFS mode.
    pub b_mag_t: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    /// Defaults to the reference D when absent.
    pub center_hz: Option<f64>,
    pub span_hz: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineshapeConfig {
    /// Per-resonance linewidth. Defaults 9 MHz (Zeeman) / 21 MHz (ZFS).
    pub fwhm_hz: f64,
    /// Per-axis contrast in Zeeman mode; per-dip contrast in ZFS mode.
    /// Placeholder default; real contrasts are instrument dependent.
    pub contrast: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthNoiseConfig {
    pub rms_v: f64,
    pub sample_rate_hz: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SenseConfig {
    pub volts_per_unit: f64,
    pub dddt_override_hz_per_k: Option<f64>,
    /// Voltage log to analyze. Wins over synthetic noise when both are set.
    pub timeseries_path: Option<String>,
    /// Synthetic white-noise series, generated with the run seed.
    pub synth: Option<SynthNoiseConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub spin: SpinConfig,
    pub grid: GridConfig,
    pub noise_sigma: f64,
    pub seed: u64,
    pub repeats: usize,
    pub temps_k: Vec<f64>,
    /// Synthetic-truth dD/dT driving the simulated spectra, Hz/K (signed).
    pub true_slope_hz_per_k: f64,
    pub lineshape: LineshapeConfig,
    pub fit: FitOptions,
    pub welch: WelchConfig,
    pub sense: SenseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Zeeman,
            spin: SpinConfig {
                d0_hz: 2.87e9,
                e_hz: 5e6,
                gamma_e_hz_per_t: GAMMA_E_HZ_PER_T,
                b_mag_t: 5e-3,
            },
            grid: GridConfig {
                center_hz: None,
                span_hz: 500e6,
                points: 601,
            },
            noise_sigma: 1e-3,
            seed: 1,
            repeats: 1,
            temps_k: vec![298.0, 303.0, 308.0, 313.0, 318.0, 323.0],
            true_slope_hz_per_k: -75.33e3,
            lineshape: LineshapeConfig {
                fwhm_hz: 9e6,
                contrast: 0.02,
            },
            fit: FitOptions::default(),
            welch: WelchConfig::default(),
            sense: SenseConfig {
                volts_per_unit: 1.0,
                dddt_override_hz_per_k: None,
                timeseries_path: None,
                synth: None,
            },
        }
    }
}

impl RunConfig {
    /// Reference ZFS-mode defaults: no bias field, 21 MHz linewidth.
    pub fn default_zfs() -> Self {
        RunConfig {
            mode: Mode::Zfs,
            spin: SpinConfig {
                b_mag_t: 0.0,
                ..RunConfig::default().spin
            },
            lineshape: LineshapeConfig {
                fwhm_hz: 21e6,
                contrast: 0.02,
            },
            ..RunConfig::default()
        }
    }

    pub fn grid_freqs(&self) -> Vec<f64> {
        frequency_grid(
            self.grid.center_hz.unwrap_or(self.spin.d0_hz),
            self.grid.span_hz,
            self.grid.points,
        )
    }

    /// Synthetic D at temperature `t_k` under the configured linear truth.
    pub fn d_true_hz(&self, t_k: f64) -> f64 {
        self.spin.d0_hz + self.true_slope_hz_per_k * (t_k - T0_K)
    }

    /// Spin parameters at temperature `t_k`; the field sits along axis 1.
    pub fn spin_params_at(&self, t_k: f64) -> SpinParams {
        let a1 = NVAxisSet::standard().axes()[0];
        let b = match self.mode {
            Mode::Zfs => [0.0; 3],
            Mode::Zeeman => [
                self.spin.b_mag_t * a1[0],
                self.spin.b_mag_t * a1[1],
                self.spin.b_mag_t * a1[2],
            ],
        };
        SpinParams {
            d_hz: self.d_true_hz(t_k),
            e_hz: match self.mode {
                // Eq.-2 bookkeeping neglects E under the bias field
                Mode::Zeeman => 0.0,
                Mode::Zfs => self.spin.e_hz,
            },
            gamma_e_hz_per_t: self.spin.gamma_e_hz_per_t,
            b_t: b,
        }
    }

    /// Every module precondition that can be checked statically.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.spin;
        if !(s.d0_hz > 0.0) {
            return Err(field_err("spin.d0_hz", "must be > 0"));
        }
        if !(s.e_hz >= 0.0) {
            return Err(field_err("spin.e_hz", "must be >= 0"));
        }
        if !(s.gamma_e_hz_per_t > 0.0) {
            return Err(field_err("spin.gamma_e_hz_per_t", "must be > 0"));
        }
        if !(s.b_mag_t >= 0.0) {
            return Err(field_err("spin.b_mag_t", "must be >= 0"));
        }
        match self.mode {
            Mode::Zfs => {
                if s.b_mag_t != 0.0 {
                    return Err(field_err(
                        "spin.b_mag_t",
                        "must be 0 in zfs mode (use mode=zeeman for a bias field)",
                    ));
                }
            }
            Mode::Zeeman => {
                let ratio = s.gamma_e_hz_per_t * s.b_mag_t / s.d0_hz;
                if ratio >= 0.5 {
                    return Err(field_err(
                        "spin.b_mag_t",
                        format!("gamma_e*|B|/D = {ratio:.3} violates the < 0.5 regime"),
                    ));
                }
            }
        }
        if !(self.grid.span_hz > 0.0) {
            return Err(field_err("grid.span_hz", "must be > 0"));
        }
        let n_params = 1 + 3 * self.mode.n_peaks();
        if self.grid.points <= n_params {
            return Err(field_err(
                "grid.points",
                format!("need more than {n_params} points to constrain the fit"),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(field_err("noise.sigma", "must be >= 0"));
        }
        if self.repeats == 0 {
            return Err(field_err("repeats", "must be >= 1"));
        }
        if self.temps_k.is_empty() {
            return Err(field_err("temps_k", "must list at least one temperature"));
        }
        for &t in &self.temps_k {
            if !(100.0..=700.0).contains(&t) {
                return Err(field_err(
                    "temps_k",
                    format!("{t} K outside the physical band 100-700 K"),
                ));
            }
        }
        if !(self.lineshape.fwhm_hz > 0.0) {
            return Err(field_err("lineshape.fwhm_hz", "must be > 0"));
        }
        let max_total_contrast = match self.mode {
            // eight half-contrast dips collapse to 4x at B = 0
            Mode::Zeeman => 4.0 * self.lineshape.contrast,
            Mode::Zfs => 2.0 * self.lineshape.contrast,
        };
        if !(self.lineshape.contrast > 0.0) || max_total_contrast >= 1.0 {
            return Err(field_err(
                "lineshape.contrast",
                "must be in (0,1) with total dip depth below 1",
            ));
        }
        if self.fit.max_iterations == 0 {
            return Err(field_err("fit.max_iterations", "must be >= 1"));
        }
        if !(self.fit.min_prominence > 0.0 && self.fit.min_prominence < 1.0) {
            return Err(field_err("fit.min_prominence", "must be in (0,1)"));
        }
        if !(0.0..1.0).contains(&self.welch.overlap) {
            return Err(field_err("welch.overlap", "must be in [0,1)"));
        }
        if let Some(seg) = self.welch.segment_len {
            if seg < 8 {
                return Err(field_err("welch.segment_len", "must be >= 8"));
            }
        }
        if !(self.sense.volts_per_unit > 0.0) {
            return Err(field_err("sense.volts_per_unit", "must be > 0"));
        }
        if let Some(d) = self.sense.dddt_override_hz_per_k {
            if d == 0.0 {
                return Err(field_err("sense.dddt_override_hz_per_k", "must be nonzero"));
            }
        }
        if let Some(sn) = &self.sense.synth {
            if !(sn.rms_v > 0.0) {
                return Err(field_err("sense.noise_rms_v", "must be > 0"));
            }
            if !(sn.sample_rate_hz > 0.0) {
                return Err(field_err("sense.sample_rate_hz", "must be > 0"));
            }
            if sn.samples < 16 {
                return Err(field_err("sense.samples", "must be >= 16"));
            }
        }
        Ok(())
    }
}

/// Parses the flat `key=value` format. `#` starts a comment; blank lines are
/// ignored; every key must be known.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Line {
                line: lineno,
                message: format!("expected key=value, got {line:?}"),
            });
        };
        let key = key.trim().to_string();
        if pairs.contains_key(&key) {
            return Err(ConfigError::Line {
                line: lineno,
                message: format!("duplicate key '{key}'"),
            });
        }
        pairs.insert(key, (lineno, value.trim().to_string()));
    }

    let mut take = |key: &str| pairs.remove(key).map(|(_, v)| v);
    let parse_f64 = |key: &str, v: String| -> Result<f64, ConfigError> {
        v.parse::<f64>()
            .map_err(|_| field_err(key, format!("not a number: {v:?}")))
    };
    let parse_usize = |key: &str, v: String| -> Result<usize, ConfigError> {
        v.parse::<usize>()
            .map_err(|_| field_err(key, format!("not an integer: {v:?}")))
    };
    let parse_bool = |key: &str, v: String| -> Result<bool, ConfigError> {
        match v.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(field_err(key, format!("expected true|false, got {v:?}"))),
        }
    };

    let mode: Mode = match take("mode") {
        Some(v) => v.parse().map_err(|e| field_err("mode", e))?,
        None => Mode::Zeeman,
    };
    let base = match mode {
        Mode::Zeeman => RunConfig::default(),
        Mode::Zfs => RunConfig::default_zfs(),
    };

    let mut cfg = base;
    cfg.mode = mode;

    if let Some(v) = take("spin.d0_hz") {
        cfg.spin.d0_hz = parse_f64("spin.d0_hz", v)?;
    }
    if let Some(v) = take("spin.e_hz") {
        cfg.spin.e_hz = parse_f64("spin.e_hz", v)?;
    }
    if let Some(v) = take("spin.gamma_e_hz_per_t") {
        cfg.spin.gamma_e_hz_per_t = parse_f64("spin.gamma_e_hz_per_t", v)?;
    }
    if let Some(v) = take("spin.b_mag_t") {
        cfg.spin.b_mag_t = parse_f64("spin.b_mag_t", v)?;
    }
    if let Some(v) = take("grid.center_hz") {
        cfg.grid.center_hz = Some(parse_f64("grid.center_hz", v)?);
    }
    if let Some(v) = take("grid.span_hz") {
        cfg.grid.span_hz = parse_f64("grid.span_hz", v)?;
    }
    if let Some(v) = take("grid.points") {
        cfg.grid.points = parse_usize("grid.points", v)?;
    }
    if let Some(v) = take("noise.sigma") {
        cfg.noise_sigma = parse_f64("noise.sigma", v)?;
    }
    if let Some(v) = take("seed") {
        cfg.seed = v
            .parse::<u64>()
            .map_err(|_| field_err("seed", format!("not a u64: {v:?}")))?;
    }
    if let Some(v) = take("repeats") {
        cfg.repeats = parse_usize("repeats", v)?;
    }
    if let Some(v) = take("temps_k") {
        let mut temps = Vec::new();
        for part in v.split(',') {
            temps.push(
                part.trim()
                    .parse::<f64>()
                    .map_err(|_| field_err("temps_k", format!("not a number: {part:?}")))?,
            );
        }
        cfg.temps_k = temps;
    }
    if let Some(v) = take("calib.true_slope_hz_per_k") {
        cfg.true_slope_hz_per_k = parse_f64("calib.true_slope_hz_per_k", v)?;
    }
    if let Some(v) = take("lineshape.fwhm_hz") {
        cfg.lineshape.fwhm_hz = parse_f64("lineshape.fwhm_hz", v)?;
    }
    if let Some(v) = take("lineshape.contrast") {
        cfg.lineshape.contrast = parse_f64("lineshape.contrast", v)?;
    }
    if let Some(v) = take("fit.max_iterations") {
        cfg.fit.max_iterations = parse_usize("fit.max_iterations", v)?;
    }
    if let Some(v) = take("fit.shared_fwhm") {
        cfg.fit.shared_fwhm = parse_bool("fit.shared_fwhm", v)?;
    }
    if let Some(v) = take("fit.min_prominence") {
        cfg.fit.min_prominence = parse_f64("fit.min_prominence", v)?;
    }
    if let Some(v) = take("welch.segment_len") {
        cfg.welch.segment_len = Some(parse_usize("welch.segment_len", v)?);
    }
    if let Some(v) = take("welch.overlap") {
        cfg.welch.overlap = parse_f64("welch.overlap", v)?;
    }
    if let Some(v) = take("welch.window") {
        cfg.welch.window = match v.as_str() {
            "hann" => Window::Hann,
            "hamming" => Window::Hamming,
            "rectangular" => Window::Rectangular,
            other => {
                return Err(field_err(
                    "welch.window",
                    format!("unknown window {other:?} (hann|hamming|rectangular)"),
                ))
            }
        };
    }
    if let Some(v) = take("sense.volts_per_unit") {
        cfg.sense.volts_per_unit = parse_f64("sense.volts_per_unit", v)?;
    }
    if let Some(v) = take("sense.dddt_override_hz_per_k") {
        cfg.sense.dddt_override_hz_per_k = Some(parse_f64("sense.dddt_override_hz_per_k", v)?);
    }
    if let Some(v) = take("sense.timeseries_path") {
        cfg.sense.timeseries_path = Some(v);
    }
    let synth_rms = take("sense.noise_rms_v");
    let synth_rate = take("sense.sample_rate_hz");
    let synth_n = take("sense.samples");
    if synth_rms.is_some() || synth_rate.is_some() || synth_n.is_some() {
        let rms = synth_rms.ok_or_else(|| field_err("sense.noise_rms_v", "required"))?;
        let rate = synth_rate.ok_or_else(|| field_err("sense.sample_rate_hz", "required"))?;
        let n = synth_n.ok_or_else(|| field_err("sense.samples", "required"))?;
        cfg.sense.synth = Some(SynthNoiseConfig {
            rms_v: parse_f64("sense.noise_rms_v", rms)?,
            sample_rate_hz: parse_f64("sense.sample_rate_hz", rate)?,
            samples: parse_usize("sense.samples", n)?,
        });
    }

    if let Some((key, (line, _))) = pairs.iter().next() {
        return Err(ConfigError::Line {
            line: *line,
            message: format!("unknown key '{key}'"),
        });
    }

    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}
