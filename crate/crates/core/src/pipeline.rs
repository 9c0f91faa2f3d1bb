//! End-to-end orchestration: simulate -> fit -> calibrate -> sense.
//!
//! Each (temperature, repeat) cell synthesizes one spectrum with its own
//! derived seed `seed + temperature_index*repeats + repeat`, fits it and
//! extracts D. All records feed the weighted D-T regression; the sensitivity
//! stage converts a voltage time series (loaded or synthesized) through the
//! rep-0 fitted model of the first temperature. Reductions run in index
//! order, so a fixed configuration and seed reproduce the report byte for
//! byte. A stage failure aborts the run but keeps everything computed so far
//! in the report.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationRecord, DExtraction};
use crate::config::{Mode, RunConfig};
use crate::fitting::{self, FitModel, FitResult};
use crate::io;
use crate::lineshape::{self, LorentzianPeak, Spectrum};
use crate::sensitivity::{self, ScaleFactor, TimeSeries};
use crate::spin::NVAxisSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Simulate,
    Fit,
    Calibrate,
    Sense,
    Io,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Simulate => "simulate",
            Stage::Fit => "fit",
            Stage::Calibrate => "calibrate",
            Stage::Sense => "sense",
            Stage::Io => "io",
        }
    }

    /// Process exit code for a failure in this stage; 0 means success.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Simulate => 3,
            Stage::Fit => 4,
            Stage::Calibrate => 5,
            Stage::Sense => 6,
            Stage::Io => 7,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageFailure {}

fn fail(stage: Stage, err: impl std::fmt::Display) -> StageFailure {
    StageFailure {
        stage,
        message: err.to_string(),
    }
}

/// One fitted repeat with its extraction, flattened for the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub baseline: f64,
    pub peaks: Vec<LorentzianPeak>,
    pub d_hz: f64,
    pub sigma_d_hz: f64,
    pub e_or_bsplit_hz: f64,
    pub asymmetry_flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemperatureBlock {
    pub temperature_k: f64,
    pub d_true_hz: f64,
    pub repeats: Vec<RepeatOutcome>,
    pub d_mean_hz: f64,
    /// Sample standard deviation over repeats; absent for a single repeat.
    pub d_std_hz: Option<f64>,
    /// Full covariance of the first repeat's fit.
    pub covariance_first: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalRecordRow {
    pub temperature_k: f64,
    pub repeat: usize,
    pub d_hz: f64,
    pub sigma_d_hz: f64,
    pub residual_hz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSection {
    pub slope_hz_per_k: f64,
    pub intercept_hz: f64,
    pub t0_k: f64,
    pub residual_std_hz: f64,
    pub records: Vec<CalRecordRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivitySection {
    pub scale_factor: ScaleFactor,
    pub dddt_hz_per_k: f64,
    pub freqs_hz: Vec<f64>,
    pub eta_k_per_sqrt_hz: Vec<f64>,
    pub avg_below_1hz: f64,
    pub avg_below_10hz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: Mode,
    pub seed: u64,
    pub repeats: usize,
    pub config: RunConfig,
    pub temperatures: Vec<TemperatureBlock>,
    pub calibration: Option<CalibrationSection>,
    pub sensitivity: Option<SensitivitySection>,
    pub aborted: Option<StageFailure>,
}

/// Serialized report, newline terminated; byte-identical for identical runs.
pub fn report_to_json(report: &PipelineReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report is always serializable");
    s.push('\n');
    s
}

/// Synthesizes the spectrum for one (temperature, repeat) cell.
pub fn synthesize_spectrum(cfg: &RunConfig, t_k: f64, seed: u64) -> Result<Spectrum, StageFailure> {
    let params = cfg.spin_params_at(t_k);
    let grid = cfg.grid_freqs();
    match cfg.mode {
        Mode::Zeeman => lineshape::zeeman_spectrum(
            &params,
            &NVAxisSet::standard(),
            cfg.lineshape.fwhm_hz,
            cfg.lineshape.contrast,
            &grid,
            cfg.noise_sigma,
            seed,
        ),
        Mode::Zfs => lineshape::zero_field_spectrum(
            &params,
            cfg.lineshape.fwhm_hz,
            cfg.lineshape.contrast,
            &grid,
            cfg.noise_sigma,
            seed,
        ),
    }
    .map_err(|e| fail(Stage::Simulate, e))
}

/// Fits one spectrum in the configured mode and extracts D.
pub fn fit_spectrum(
    cfg: &RunConfig,
    spectrum: &Spectrum,
) -> Result<(FitResult, DExtraction), StageFailure> {
    let n_peaks = cfg.mode.n_peaks();
    let init = fitting::initial_guesses(spectrum, n_peaks, cfg.fit.min_prominence)
        .map_err(|e| fail(Stage::Fit, e))?;
    let result =
        fitting::fit(spectrum, n_peaks, Some(&init), &cfg.fit).map_err(|e| fail(Stage::Fit, e))?;
    let extraction = match cfg.mode {
        Mode::Zeeman => calibration::extract_d_zeeman(&result),
        Mode::Zfs => calibration::extract_d_zfs(&result),
    }
    .map_err(|e| fail(Stage::Fit, e))?;
    Ok((result, extraction))
}

/// Seed of the synthetic sensing time series: next index after the last
/// spectrum repeat.
pub fn timeseries_seed(cfg: &RunConfig) -> u64 {
    cfg.seed + (cfg.temps_k.len() * cfg.repeats) as u64
}

/// White-noise voltage log for the sensing stage.
pub fn synthesize_timeseries(cfg: &RunConfig) -> Option<TimeSeries> {
    let synth = cfg.sense.synth.as_ref()?;
    let mut rng = ChaCha8Rng::seed_from_u64(timeseries_seed(cfg));
    let normal = Normal::new(0.0, synth.rms_v).expect("validated rms");
    let samples = (0..synth.samples).map(|_| normal.sample(&mut rng)).collect();
    Some(TimeSeries {
        sample_rate_hz: synth.sample_rate_hz,
        samples_v: samples,
    })
}

fn spectrum_filename(t_idx: usize, rep: usize) -> String {
    format!("spectrum_t{t_idx:02}_r{rep:03}.csv")
}

fn run_inner(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    report: &mut PipelineReport,
) -> Result<(), StageFailure> {
    cfg.validate().map_err(|e| fail(Stage::Config, e))?;

    let spectra_dir: Option<PathBuf> = match out_dir {
        Some(dir) => {
            let sub = dir.join("spectra");
            std::fs::create_dir_all(&sub).map_err(|e| fail(Stage::Io, e))?;
            Some(sub)
        }
        None => None,
    };

    let mut records: Vec<CalibrationRecord> = Vec::new();
    let mut record_keys: Vec<(f64, usize)> = Vec::new();
    let mut index_rows: Vec<String> = Vec::new();

    for (t_idx, &t_k) in cfg.temps_k.iter().enumerate() {
        report.temperatures.push(TemperatureBlock {
            temperature_k: t_k,
            d_true_hz: cfg.d_true_hz(t_k),
            repeats: Vec::new(),
            d_mean_hz: 0.0,
            d_std_hz: None,
            covariance_first: Vec::new(),
        });

        for rep in 0..cfg.repeats {
            let seed = cfg.seed + (t_idx * cfg.repeats + rep) as u64;
            let spectrum = synthesize_spectrum(cfg, t_k, seed)?;

            if let Some(dir) = &spectra_dir {
                let name = spectrum_filename(t_idx, rep);
                io::save_spectrum_csv(&dir.join(&name), &spectrum)
                    .map_err(|e| fail(Stage::Io, e))?;
                index_rows.push(format!("{},{rep},spectra/{name}", io::format_float(t_k)));
            }

            let (fit, extraction) = fit_spectrum(cfg, &spectrum)?;

            let block = report.temperatures.last_mut().expect("pushed above");
            if rep == 0 {
                block.covariance_first = fit.covariance.clone();
                if let Some(dir) = out_dir {
                    let curve: Vec<f64> = spectrum
                        .freqs_hz()
                        .iter()
                        .map(|&f| fit.model.eval(f))
                        .collect();
                    io::write_table(
                        &dir.join(format!("fit_curve_t{t_idx:02}.csv")),
                        &["frequency_hz", "signal"],
                        &[spectrum.freqs_hz(), &curve],
                    )
                    .map_err(|e| fail(Stage::Io, e))?;
                }
            }
            block.repeats.push(RepeatOutcome {
                repeat: rep,
                seed,
                converged: fit.converged,
                iterations: fit.iterations,
                residual_norm: fit.residual_norm,
                baseline: fit.model.baseline,
                peaks: fit.model.peaks.clone(),
                d_hz: extraction.d_hz,
                sigma_d_hz: extraction.sigma_d_hz,
                e_or_bsplit_hz: extraction.e_or_bsplit_hz,
                asymmetry_flagged: extraction.asymmetry.is_some(),
            });

            records.push(
                CalibrationRecord::new(t_k, extraction).map_err(|e| fail(Stage::Fit, e))?,
            );
            record_keys.push((t_k, rep));
        }

        let block = report.temperatures.last_mut().expect("pushed above");
        let ds: Vec<f64> = block.repeats.iter().map(|r| r.d_hz).collect();
        block.d_mean_hz = ds.iter().sum::<f64>() / ds.len() as f64;
        if ds.len() >= 2 {
            block.d_std_hz =
                Some(calibration::repeatability_std(&ds).map_err(|e| fail(Stage::Calibrate, e))?);
        }
    }

    if let Some(dir) = &spectra_dir {
        let mut text = String::from("temperature_k,repeat,path\n");
        for row in &index_rows {
            text.push_str(row);
            text.push('\n');
        }
        std::fs::write(dir.join("index.csv"), text).map_err(|e| fail(Stage::Io, e))?;
    }

    // D-T calibration needs a usable temperature spread
    if cfg.temps_k.len() >= 3 {
        let cal = calibration::fit_dt(&records).map_err(|e| fail(Stage::Calibrate, e))?;
        let rows: Vec<CalRecordRow> = records
            .iter()
            .zip(&record_keys)
            .zip(&cal.residuals_hz)
            .map(|((r, &(t, rep)), &res)| CalRecordRow {
                temperature_k: t,
                repeat: rep,
                d_hz: r.extraction.d_hz,
                sigma_d_hz: r.extraction.sigma_d_hz,
                residual_hz: res,
            })
            .collect();

        if let Some(dir) = out_dir {
            let cols: [Vec<f64>; 5] = [
                rows.iter().map(|r| r.temperature_k).collect(),
                rows.iter().map(|r| r.repeat as f64).collect(),
                rows.iter().map(|r| r.d_hz).collect(),
                rows.iter().map(|r| r.sigma_d_hz).collect(),
                rows.iter().map(|r| r.residual_hz).collect(),
            ];
            io::write_table(
                &dir.join("calibration.csv"),
                &["temperature_k", "repeat", "d_hz", "sigma_d_hz", "residual_hz"],
                &[&cols[0], &cols[1], &cols[2], &cols[3], &cols[4]],
            )
            .map_err(|e| fail(Stage::Io, e))?;
        }

        report.calibration = Some(CalibrationSection {
            slope_hz_per_k: cal.slope_hz_per_k,
            intercept_hz: cal.intercept_hz,
            t0_k: cal.t0_k,
            residual_std_hz: cal.residual_std_hz,
            records: rows,
        });
    }

    // Sensitivity: only when a voltage series is configured
    let ts: Option<TimeSeries> = if let Some(path) = &cfg.sense.timeseries_path {
        Some(io::load_timeseries_csv(Path::new(path)).map_err(|e| fail(Stage::Io, e))?)
    } else {
        let synth = synthesize_timeseries(cfg);
        if let (Some(series), Some(dir)) = (&synth, out_dir) {
            io::save_timeseries_csv(&dir.join("timeseries.csv"), series)
                .map_err(|e| fail(Stage::Io, e))?;
        }
        synth
    };

    if let Some(ts) = ts {
        let dddt = match cfg.sense.dddt_override_hz_per_k {
            Some(d) => d,
            None => match &report.calibration {
                Some(c) => c.slope_hz_per_k,
                None => {
                    return Err(fail(
                        Stage::Sense,
                        "no dD/dT available: set sense.dddt_override_hz_per_k or run >= 3 temperatures",
                    ))
                }
            },
        };
        let first = report
            .temperatures
            .first()
            .and_then(|b| b.repeats.first())
            .expect("at least one fitted repeat");
        let model = FitModel {
            baseline: first.baseline,
            peaks: first.peaks.clone(),
        };
        let sf = sensitivity::scale_factor(&model, cfg.sense.volts_per_unit)
            .map_err(|e| fail(Stage::Sense, e))?;
        let psd = sensitivity::welch_psd(&ts, &cfg.welch).map_err(|e| fail(Stage::Sense, e))?;
        let spec = sensitivity::sensitivity_spectrum(&psd, &sf, dddt)
            .map_err(|e| fail(Stage::Sense, e))?;

        if let Some(dir) = out_dir {
            io::write_table(
                &dir.join("sensitivity.csv"),
                &["frequency_hz", "eta_k_per_sqrt_hz"],
                &[&spec.freqs_hz, &spec.eta_k_per_sqrt_hz],
            )
            .map_err(|e| fail(Stage::Io, e))?;
        }

        report.sensitivity = Some(SensitivitySection {
            scale_factor: sf,
            dddt_hz_per_k: dddt,
            freqs_hz: spec.freqs_hz,
            eta_k_per_sqrt_hz: spec.eta_k_per_sqrt_hz,
            avg_below_1hz: spec.avg_below_1hz,
            avg_below_10hz: spec.avg_below_10hz,
        });
    }

    Ok(())
}

/// Runs the whole chain. Plot-ready CSVs are written when `out_dir` is given.
/// A stage failure lands in `report.aborted`; completed per-temperature
/// results stay in the report.
pub fn run_pipeline(cfg: &RunConfig, out_dir: Option<&Path>) -> PipelineReport {
    let mut report = PipelineReport {
        mode: cfg.mode,
        seed: cfg.seed,
        repeats: cfg.repeats,
        config: cfg.clone(),
        temperatures: Vec::new(),
        calibration: None,
        sensitivity: None,
        aborted: None,
    };
    if let Err(failure) = run_inner(cfg, out_dir, &mut report) {
        report.aborted = Some(failure);
    }
    report
}
