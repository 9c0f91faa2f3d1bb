//! `nvtherm` — simulate, fit, calibrate and sense from the command line.
//!
//! The subcommands compose over files: `simulate` writes spectrum CSVs,
//! `fit` turns them into fitted records, `calibrate` regresses D against T,
//! `sense` converts a voltage log into temperature sensitivity, and
//! `pipeline` runs the whole chain producing the same values.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nvtherm_core::calibration::{self, CalibrationRecord, DExtraction, ExtractionMode};
use nvtherm_core::config::{load_config, Mode, RunConfig};
use nvtherm_core::fitting::FitModel;
use nvtherm_core::io as csv;
use nvtherm_core::pipeline::{
    self, CalRecordRow, CalibrationSection, RepeatOutcome, SensitivitySection, Stage,
    StageFailure, TemperatureBlock,
};
use nvtherm_core::sensitivity;

#[derive(Parser)]
#[command(name = "nvtherm", version, about = "NV-center ODMR thermometry toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration, flat key=value file.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured Monte-Carlo repeat count.
    #[arg(long)]
    repeats: Option<usize>,
    /// Override the configured mode (zfs|zeeman). Other values keep their
    /// configured settings.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize per-temperature spectra (and the sensing time series).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Fit one spectrum (--in) or a simulated directory (--in-dir).
    Fit {
        #[command(flatten)]
        common: Common,
        /// Single spectrum CSV.
        #[arg(long = "in", conflicts_with = "in_dir")]
        input: Option<PathBuf>,
        /// Directory produced by `simulate`.
        #[arg(long = "in-dir")]
        in_dir: Option<PathBuf>,
        /// Output JSON path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted D-T regression over fitted records.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// fits.json produced by `fit --in-dir`.
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Temperature sensitivity from a fitted model and a voltage log.
    Sense {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fits: PathBuf,
        /// Voltage log CSV; the configured synthetic noise when absent.
        #[arg(long)]
        timeseries: Option<PathBuf>,
        /// calibration.json supplying dD/dT when no override is configured.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full simulate -> fit -> calibrate -> sense chain.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Report JSON path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also emit plot-ready CSVs here.
        #[arg(long = "out-dir")]
        out_dir: Option<PathBuf>,
    },
}

/// fits.json: everything `calibrate` and `sense` need downstream.
#[derive(Serialize, Deserialize)]
struct FitsDocument {
    mode: Mode,
    temperatures: Vec<TemperatureBlock>,
}

/// Single-spectrum fit output.
#[derive(Serialize, Deserialize)]
struct SingleFitDocument {
    fit: nvtherm_core::fitting::FitResult,
    extraction: DExtraction,
}

fn fail(stage: Stage, err: impl std::fmt::Display) -> StageFailure {
    StageFailure {
        stage,
        message: err.to_string(),
    }
}

fn load_run_config(common: &Common) -> Result<RunConfig, StageFailure> {
    let mut cfg = load_config(&common.config).map_err(|e| fail(Stage::Config, e))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(repeats) = common.repeats {
        cfg.repeats = repeats;
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode;
    }
    cfg.validate().map_err(|e| fail(Stage::Config, e))?;
    Ok(cfg)
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), StageFailure> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| fail(Stage::Io, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<(), StageFailure> {
    let spectra_dir = out_dir.join("spectra");
    std::fs::create_dir_all(&spectra_dir).map_err(|e| fail(Stage::Io, e))?;

    let mut index = String::from("temperature_k,repeat,path\n");
    for (t_idx, &t_k) in cfg.temps_k.iter().enumerate() {
        for rep in 0..cfg.repeats {
            let seed = cfg.seed + (t_idx * cfg.repeats + rep) as u64;
            let spectrum = pipeline::synthesize_spectrum(cfg, t_k, seed)?;
            let name = format!("spectrum_t{t_idx:02}_r{rep:03}.csv");
            csv::save_spectrum_csv(&spectra_dir.join(&name), &spectrum)
                .map_err(|e| fail(Stage::Io, e))?;
            index.push_str(&format!(
                "{},{rep},spectra/{name}\n",
                csv::format_float(t_k)
            ));
        }
    }
    std::fs::write(spectra_dir.join("index.csv"), index).map_err(|e| fail(Stage::Io, e))?;

    if let Some(ts) = pipeline::synthesize_timeseries(cfg) {
        csv::save_timeseries_csv(&out_dir.join("timeseries.csv"), &ts)
            .map_err(|e| fail(Stage::Io, e))?;
    }
    Ok(())
}

fn cmd_fit_single(
    cfg: &RunConfig,
    input: &Path,
    out: &Option<PathBuf>,
) -> Result<(), StageFailure> {
    let spectrum = csv::load_spectrum_csv(input).map_err(|e| fail(Stage::Io, e))?;
    let (fit, extraction) = pipeline::fit_spectrum(cfg, &spectrum)?;
    emit(out, &to_json(&SingleFitDocument { fit, extraction }))
}

fn cmd_fit_dir(cfg: &RunConfig, in_dir: &Path, out: &Option<PathBuf>) -> Result<(), StageFailure> {
    let index_path = in_dir.join("spectra").join("index.csv");
    let text = std::fs::read_to_string(&index_path).map_err(|e| fail(Stage::Io, e))?;
    let mut rows: Vec<(f64, usize, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "temperature_k,repeat,path" {
                return Err(fail(
                    Stage::Io,
                    format!("{}: unexpected index header {line:?}", index_path.display()),
                ));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(fail(
                Stage::Io,
                format!("{}:{}: expected 3 fields", index_path.display(), i + 1),
            ));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| fail(Stage::Io, format!("bad temperature {:?}", fields[0])))?;
        let rep: usize = fields[1]
            .parse()
            .map_err(|_| fail(Stage::Io, format!("bad repeat {:?}", fields[1])))?;
        rows.push((t, rep, fields[2].to_string()));
    }

    let mut temperatures: Vec<TemperatureBlock> = Vec::new();
    for (row_idx, (t_k, rep, rel_path)) in rows.iter().enumerate() {
        let new_block = temperatures
            .last()
            .map(|b| b.temperature_k != *t_k)
            .unwrap_or(true);
        if new_block {
            temperatures.push(TemperatureBlock {
                temperature_k: *t_k,
                d_true_hz: cfg.d_true_hz(*t_k),
                repeats: Vec::new(),
                d_mean_hz: 0.0,
                d_std_hz: None,
                covariance_first: Vec::new(),
            });
        }
        let spectrum =
            csv::load_spectrum_csv(&in_dir.join(rel_path)).map_err(|e| fail(Stage::Io, e))?;
        let (fit, extraction) = pipeline::fit_spectrum(cfg, &spectrum)?;
        let block = temperatures.last_mut().expect("pushed above");
        if block.repeats.is_empty() {
            block.covariance_first = fit.covariance.clone();
        }
        block.repeats.push(RepeatOutcome {
            repeat: *rep,
            seed: cfg.seed + row_idx as u64,
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
    }
    for block in &mut temperatures {
        let ds: Vec<f64> = block.repeats.iter().map(|r| r.d_hz).collect();
        block.d_mean_hz = ds.iter().sum::<f64>() / ds.len() as f64;
        if ds.len() >= 2 {
            block.d_std_hz = Some(
                calibration::repeatability_std(&ds).map_err(|e| fail(Stage::Fit, e))?,
            );
        }
    }

    emit(
        out,
        &to_json(&FitsDocument {
            mode: cfg.mode,
            temperatures,
        }),
    )
}

fn records_from_fits(
    doc: &FitsDocument,
) -> Result<(Vec<CalibrationRecord>, Vec<(f64, usize)>), StageFailure> {
    let mode = match doc.mode {
        Mode::Zeeman => ExtractionMode::Zeeman,
        Mode::Zfs => ExtractionMode::ZeroField,
    };
    let mut records = Vec::new();
    let mut keys = Vec::new();
    for block in &doc.temperatures {
        for rep in &block.repeats {
            records.push(
                CalibrationRecord::new(
                    block.temperature_k,
                    DExtraction {
                        d_hz: rep.d_hz,
                        sigma_d_hz: rep.sigma_d_hz,
                        mode,
                        e_or_bsplit_hz: rep.e_or_bsplit_hz,
                        asymmetry: None,
                    },
                )
                .map_err(|e| fail(Stage::Calibrate, e))?,
            );
            keys.push((block.temperature_k, rep.repeat));
        }
    }
    Ok((records, keys))
}

fn cmd_calibrate(fits: &Path, out: &Option<PathBuf>) -> Result<(), StageFailure> {
    let text = std::fs::read_to_string(fits).map_err(|e| fail(Stage::Io, e))?;
    let doc: FitsDocument =
        serde_json::from_str(&text).map_err(|e| fail(Stage::Io, format!("{}: {e}", fits.display())))?;
    let (records, keys) = records_from_fits(&doc)?;
    let cal = calibration::fit_dt(&records).map_err(|e| fail(Stage::Calibrate, e))?;
    let rows: Vec<CalRecordRow> = records
        .iter()
        .zip(&keys)
        .zip(&cal.residuals_hz)
        .map(|((r, &(t, rep)), &res)| CalRecordRow {
            temperature_k: t,
            repeat: rep,
            d_hz: r.extraction.d_hz,
            sigma_d_hz: r.extraction.sigma_d_hz,
            residual_hz: res,
        })
        .collect();
    let section = CalibrationSection {
        slope_hz_per_k: cal.slope_hz_per_k,
        intercept_hz: cal.intercept_hz,
        t0_k: cal.t0_k,
        residual_std_hz: cal.residual_std_hz,
        records: rows,
    };
    emit(out, &to_json(&section))
}

fn cmd_sense(
    cfg: &RunConfig,
    fits: &Path,
    timeseries: &Option<PathBuf>,
    calibration_path: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<(), StageFailure> {
    let text = std::fs::read_to_string(fits).map_err(|e| fail(Stage::Io, e))?;
    let doc: FitsDocument =
        serde_json::from_str(&text).map_err(|e| fail(Stage::Io, format!("{}: {e}", fits.display())))?;

    let ts = match timeseries {
        Some(path) => csv::load_timeseries_csv(path).map_err(|e| fail(Stage::Io, e))?,
        None => pipeline::synthesize_timeseries(cfg).ok_or_else(|| {
            fail(
                Stage::Sense,
                "no --timeseries given and no synthetic noise configured",
            )
        })?,
    };

    let dddt = match cfg.sense.dddt_override_hz_per_k {
        Some(d) => d,
        None => match calibration_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| fail(Stage::Io, e))?;
                let section: CalibrationSection = serde_json::from_str(&text)
                    .map_err(|e| fail(Stage::Io, format!("{}: {e}", path.display())))?;
                section.slope_hz_per_k
            }
            None => {
                return Err(fail(
                    Stage::Sense,
                    "no dD/dT available: pass --calibration or set sense.dddt_override_hz_per_k",
                ))
            }
        },
    };

    let first = doc
        .temperatures
        .first()
        .and_then(|b| b.repeats.first())
        .ok_or_else(|| fail(Stage::Sense, "fits document holds no fitted repeats"))?;
    let model = FitModel {
        baseline: first.baseline,
        peaks: first.peaks.clone(),
    };
    let sf = sensitivity::scale_factor(&model, cfg.sense.volts_per_unit)
        .map_err(|e| fail(Stage::Sense, e))?;
    let psd = sensitivity::welch_psd(&ts, &cfg.welch).map_err(|e| fail(Stage::Sense, e))?;
    let spec =
        sensitivity::sensitivity_spectrum(&psd, &sf, dddt).map_err(|e| fail(Stage::Sense, e))?;

    let section = SensitivitySection {
        scale_factor: sf,
        dddt_hz_per_k: dddt,
        freqs_hz: spec.freqs_hz,
        eta_k_per_sqrt_hz: spec.eta_k_per_sqrt_hz,
        avg_below_1hz: spec.avg_below_1hz,
        avg_below_10hz: spec.avg_below_10hz,
    };
    emit(out, &to_json(&section))
}

fn cmd_pipeline(
    cfg: &RunConfig,
    out: &Option<PathBuf>,
    out_dir: &Option<PathBuf>,
) -> Result<(), StageFailure> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| fail(Stage::Io, e))?;
    }
    let report = pipeline::run_pipeline(cfg, out_dir.as_deref());
    emit(out, &pipeline::report_to_json(&report))?;
    match report.aborted {
        Some(failure) => Err(failure),
        None => Ok(()),
    }
}

fn run() -> Result<(), StageFailure> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate { common, out_dir } => {
            let cfg = load_run_config(common)?;
            cmd_simulate(&cfg, out_dir)
        }
        Command::Fit {
            common,
            input,
            in_dir,
            out,
        } => {
            let cfg = load_run_config(common)?;
            match (input, in_dir) {
                (Some(path), None) => cmd_fit_single(&cfg, path, out),
                (None, Some(dir)) => cmd_fit_dir(&cfg, dir, out),
                _ => Err(fail(Stage::Config, "pass exactly one of --in or --in-dir")),
            }
        }
        Command::Calibrate { common, fits, out } => {
            // config still parsed so a bad file fails fast under every verb
            load_run_config(common)?;
            cmd_calibrate(fits, out)
        }
        Command::Sense {
            common,
            fits,
            timeseries,
            calibration,
            out,
        } => {
            let cfg = load_run_config(common)?;
            cmd_sense(&cfg, fits, timeseries, calibration, out)
        }
        Command::Pipeline {
            common,
            out,
            out_dir,
        } => {
            let cfg = load_run_config(common)?;
            cmd_pipeline(&cfg, out, out_dir)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.stage.exit_code() as u8)
        }
    }
}
