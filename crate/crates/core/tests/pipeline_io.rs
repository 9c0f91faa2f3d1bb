//! File-level checks of the pipeline: emitted CSVs re-ingest losslessly and
//! refitting the written spectra reproduces the report values exactly.

use nvtherm_core::config::{RunConfig, SynthNoiseConfig};
use nvtherm_core::io::{load_spectrum_csv, load_timeseries_csv, read_table};
use nvtherm_core::pipeline::{fit_spectrum, report_to_json, run_pipeline, synthesize_timeseries};

fn cfg_with_sense() -> RunConfig {
    let mut cfg = RunConfig {
        repeats: 2,
        noise_sigma: 1e-4,
        temps_k: vec![298.0, 308.0, 318.0],
        ..RunConfig::default()
    };
    cfg.sense.synth = Some(SynthNoiseConfig {
        rms_v: 1e-4,
        sample_rate_hz: 100.0,
        samples: 8192,
    });
    cfg
}

#[test]
fn emitted_files_reingest_and_refit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cfg_with_sense();
    let report = run_pipeline(&cfg, Some(dir.path()));
    assert!(report.aborted.is_none(), "{:?}", report.aborted);

    // index lists every (temperature, repeat) cell
    let index = std::fs::read_to_string(dir.path().join("spectra/index.csv")).unwrap();
    let rows: Vec<&str> = index.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);

    // re-ingest every spectrum and refit: values must match the report
    for (row, outcome) in rows.iter().zip(
        report
            .temperatures
            .iter()
            .flat_map(|b| b.repeats.iter().map(move |r| (b.temperature_k, r))),
    ) {
        let fields: Vec<&str> = row.split(',').collect();
        let t: f64 = fields[0].parse().unwrap();
        let (t_block, rep) = (outcome.0, outcome.1);
        assert_eq!(t, t_block);
        let spectrum = load_spectrum_csv(&dir.path().join(fields[2])).unwrap();
        let (fit, ext) = fit_spectrum(&cfg, &spectrum).unwrap();
        assert_eq!(fit.model.baseline, rep.baseline);
        assert_eq!(fit.model.peaks, rep.peaks);
        assert_eq!(ext.d_hz, rep.d_hz);
        assert_eq!(ext.sigma_d_hz, rep.sigma_d_hz);
    }

    // fit curves re-ingest as valid spectrum files
    let curve = load_spectrum_csv(&dir.path().join("fit_curve_t00.csv")).unwrap();
    assert_eq!(curve.len(), cfg.grid.points);

    // the calibration table matches the report section
    let (headers, cols) = read_table(&dir.path().join("calibration.csv")).unwrap();
    assert_eq!(
        headers,
        vec!["temperature_k", "repeat", "d_hz", "sigma_d_hz", "residual_hz"]
    );
    let cal = report.calibration.as_ref().unwrap();
    assert_eq!(cols[0].len(), cal.records.len());
    for (i, rec) in cal.records.iter().enumerate() {
        assert_eq!(cols[0][i], rec.temperature_k);
        assert_eq!(cols[2][i], rec.d_hz);
        assert_eq!(cols[4][i], rec.residual_hz);
    }

    // sensitivity table matches the report section
    let (headers, cols) = read_table(&dir.path().join("sensitivity.csv")).unwrap();
    assert_eq!(headers, vec!["frequency_hz", "eta_k_per_sqrt_hz"]);
    let sense = report.sensitivity.as_ref().unwrap();
    assert_eq!(cols[0], sense.freqs_hz);
    assert_eq!(cols[1], sense.eta_k_per_sqrt_hz);

    // the written time series equals the synthetic one bit for bit
    let ts = load_timeseries_csv(&dir.path().join("timeseries.csv")).unwrap();
    assert_eq!(ts, synthesize_timeseries(&cfg).unwrap());
}

#[test]
fn file_emission_does_not_change_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cfg_with_sense();
    let with_files = run_pipeline(&cfg, Some(dir.path()));
    let in_memory = run_pipeline(&cfg, None);
    assert_eq!(report_to_json(&with_files), report_to_json(&in_memory));
}

#[test]
fn aborted_run_preserves_partial_temperatures() {
    let mut cfg = cfg_with_sense();
    cfg.temps_k = vec![298.0]; // calibration impossible, sense lacks dD/dT
    let report = run_pipeline(&cfg, None);
    let aborted = report.aborted.expect("sense stage must fail");
    assert_eq!(aborted.stage.exit_code(), 6);
    assert_eq!(report.temperatures.len(), 1);
    assert_eq!(report.temperatures[0].repeats.len(), 2);
    assert!(report.calibration.is_none());
}
