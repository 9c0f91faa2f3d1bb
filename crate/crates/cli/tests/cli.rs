//! End-to-end checks of the `nvtherm` binary: subcommand composability,
//! deterministic reports and the stage-partitioned exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn nvtherm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvtherm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let base = "\
mode=zeeman
noise.sigma=1e-4
seed=7
repeats=2
temps_k=298,308,318
sense.noise_rms_v=1e-4
sense.sample_rate_hz=100
sense.samples=8192
";
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

#[test]
fn pipeline_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    for name in ["a.json", "b.json"] {
        let out = nvtherm(
            &[
                "pipeline",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                name,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn chained_subcommands_match_the_pipeline_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();

    let run = |args: &[&str]| {
        let out = nvtherm(args, dir.path());
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    run(&["simulate", "--config", cfg_s, "--out-dir", "sim"]);
    run(&[
        "fit", "--config", cfg_s, "--in-dir", "sim", "--out", "fits.json",
    ]);
    run(&[
        "calibrate", "--config", cfg_s, "--fits", "fits.json", "--out", "calibration.json",
    ]);
    run(&[
        "sense",
        "--config",
        cfg_s,
        "--fits",
        "fits.json",
        "--timeseries",
        "sim/timeseries.csv",
        "--calibration",
        "calibration.json",
        "--out",
        "sensitivity.json",
    ]);
    run(&[
        "pipeline", "--config", cfg_s, "--out", "report.json", "--out-dir", "plots",
    ]);

    let value = |name: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(name)).unwrap()).unwrap()
    };
    let report = value("report.json");
    let fits = value("fits.json");
    let calibration = value("calibration.json");
    let sensitivity = value("sensitivity.json");

    assert_eq!(report["temperatures"], fits["temperatures"]);
    assert_eq!(report["mode"], fits["mode"]);
    assert_eq!(report["calibration"], calibration);
    assert_eq!(report["sensitivity"], sensitivity);

    // the simulated spectra are byte-identical between the two runs
    let a = std::fs::read(dir.path().join("sim/spectra/spectrum_t00_r000.csv")).unwrap();
    let b = std::fs::read(dir.path().join("plots/spectra/spectrum_t00_r000.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_fit_emits_a_converged_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    let out = nvtherm(&["simulate", "--config", cfg_s, "--out-dir", "sim"], dir.path());
    assert!(out.status.success());

    let out = nvtherm(
        &[
            "fit",
            "--config",
            cfg_s,
            "--in",
            "sim/spectra/spectrum_t01_r001.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["fit"]["converged"], serde_json::Value::Bool(true));
    assert_eq!(doc["fit"]["model"]["peaks"].as_array().unwrap().len(), 4);
    assert!(doc["extraction"]["d_hz"].as_f64().unwrap() > 2.8e9);
}

#[test]
fn exit_codes_partition_by_stage() {
    let dir = tempfile::tempdir().unwrap();

    // config stage: regime violation
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "mode=zeeman\nspin.b_mag_t=0.2\n").unwrap();
    let out = nvtherm(
        &["pipeline", "--config", bad.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();

    // io stage: missing input file
    let out = nvtherm(
        &["fit", "--config", cfg_s, "--in", "missing.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(7));

    // fit stage: a flat spectrum offers no peak candidates
    let flat = dir.path().join("flat.csv");
    let mut text = String::from("frequency_hz,signal\n");
    for i in 0..50 {
        text.push_str(&format!("{},1.0\n", 2.8e9 + i as f64 * 1e6));
    }
    std::fs::write(&flat, text).unwrap();
    let out = nvtherm(
        &["fit", "--config", cfg_s, "--in", "flat.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // calibrate stage: single-temperature fits cannot span 10 K
    let narrow = dir.path().join("narrow.cfg");
    std::fs::write(
        &narrow,
        "mode=zeeman\nnoise.sigma=1e-4\nrepeats=2\ntemps_k=298,299,300\n",
    )
    .unwrap();
    let narrow_s = narrow.to_str().unwrap();
    let out = nvtherm(
        &["simulate", "--config", narrow_s, "--out-dir", "narrow_sim"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = nvtherm(
        &[
            "fit", "--config", narrow_s, "--in-dir", "narrow_sim", "--out", "narrow_fits.json",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let out = nvtherm(
        &[
            "calibrate", "--config", narrow_s, "--fits", "narrow_fits.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));

    // sense stage: no dD/dT source
    let out = nvtherm(
        &["sense", "--config", cfg_s, "--fits", "narrow_fits.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(6), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_and_mode_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg_s = cfg.to_str().unwrap();

    let out_a = nvtherm(
        &["pipeline", "--config", cfg_s, "--seed", "1", "--out", "s1.json"],
        dir.path(),
    );
    let out_b = nvtherm(
        &["pipeline", "--config", cfg_s, "--seed", "2", "--out", "s2.json"],
        dir.path(),
    );
    assert!(out_a.status.success() && out_b.status.success());
    let a = std::fs::read(dir.path().join("s1.json")).unwrap();
    let b = std::fs::read(dir.path().join("s2.json")).unwrap();
    assert_ne!(a, b);

    // a mode override that violates the configured field must fail fast
    let out = nvtherm(
        &["pipeline", "--config", cfg_s, "--mode", "zfs"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
