//! CSV ingestion and emission.
//!
//! Two fixed formats plus a generic numeric table for plot data:
//!
//! * spectrum — header `frequency_hz,signal`, one row per sample;
//! * time series — comment header `# sample_rate_hz=<float>`, then a
//!   `voltage_v` column.
//!
//! All files are UTF-8 with LF line endings. Floats are written with 17
//! significant digits, so save/load round-trips reproduce values bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::lineshape::Spectrum;
use crate::sensitivity::TimeSeries;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// 17 significant digits: enough to reconstruct any f64 exactly.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_float(path: &Path, line: usize, field: &str) -> Result<f64, IoError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("not a number: {field:?}")))
}

pub fn save_spectrum_csv(path: &Path, s: &Spectrum) -> Result<(), IoError> {
    let mut out = String::from("frequency_hz,signal\n");
    for (f, y) in s.freqs_hz().iter().zip(s.signal()) {
        let _ = writeln!(out, "{},{}", format_float(*f), format_float(*y));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_spectrum_csv(path: &Path) -> Result<Spectrum, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "frequency_hz,signal" => {}
        Some((_, header)) => {
            return Err(parse_err(
                path,
                1,
                format!("expected header 'frequency_hz,signal', got {header:?}"),
            ))
        }
        None => return Err(parse_err(path, 1, "empty file")),
    }

    let mut freqs = Vec::new();
    let mut signal = Vec::new();
    let mut n_lines = 1;
    for (idx, line) in lines {
        let lineno = idx + 1;
        n_lines = lineno;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(path, lineno, "expected exactly 2 comma-separated fields"));
        };
        let f = parse_float(path, lineno, a)?;
        let y = parse_float(path, lineno, b)?;
        if let Some(&prev) = freqs.last() {
            if f <= prev {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("frequency not strictly increasing: {prev} then {f}"),
                ));
            }
        }
        freqs.push(f);
        signal.push(y);
    }
    if freqs.len() < 2 {
        return Err(parse_err(path, n_lines, "need at least 2 data rows"));
    }
    Spectrum::new(freqs, signal).map_err(|e| parse_err(path, n_lines, e.to_string()))
}

pub fn save_timeseries_csv(path: &Path, ts: &TimeSeries) -> Result<(), IoError> {
    let mut out = format!("# sample_rate_hz={}\nvoltage_v\n", format_float(ts.sample_rate_hz));
    for v in &ts.samples_v {
        let _ = writeln!(out, "{}", format_float(*v));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_timeseries_csv(path: &Path) -> Result<TimeSeries, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let rate = match lines.next() {
        Some((_, line)) if line.trim_start().starts_with("# sample_rate_hz=") => {
            let value = line.trim_start().trim_start_matches("# sample_rate_hz=");
            parse_float(path, 1, value)?
        }
        Some((_, line)) => {
            return Err(parse_err(
                path,
                1,
                format!("expected '# sample_rate_hz=<float>' header, got {line:?}"),
            ))
        }
        None => return Err(parse_err(path, 1, "empty file")),
    };

    match lines.next() {
        Some((_, header)) if header.trim() == "voltage_v" => {}
        Some((_, header)) => {
            return Err(parse_err(
                path,
                2,
                format!("expected column header 'voltage_v', got {header:?}"),
            ))
        }
        None => return Err(parse_err(path, 2, "missing 'voltage_v' header")),
    }

    let mut samples = Vec::new();
    let mut n_lines = 2;
    for (idx, line) in lines {
        let lineno = idx + 1;
        n_lines = lineno;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_float(path, lineno, line)?);
    }
    if samples.len() < 2 {
        return Err(parse_err(
            path,
            n_lines,
            format!("need at least 2 samples, got {}", samples.len()),
        ));
    }
    TimeSeries::new(rate, samples).map_err(|e| parse_err(path, n_lines, e.to_string()))
}

/// Plot-ready numeric table: one header row, comma-separated float columns.
pub fn write_table(path: &Path, headers: &[&str], columns: &[&[f64]]) -> Result<(), IoError> {
    assert_eq!(headers.len(), columns.len(), "one header per column");
    let rows = columns.first().map_or(0, |c| c.len());
    for c in columns {
        assert_eq!(c.len(), rows, "ragged table");
    }
    let mut out = headers.join(",");
    out.push('\n');
    for r in 0..rows {
        let row: Vec<String> = columns.iter().map(|c| format_float(c[r])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a numeric table back; used to verify emitted CSVs re-ingest without
/// loss.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let headers: Vec<String> = match lines.next() {
        Some((_, h)) => h.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != headers.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, got {}", headers.len(), fields.len()),
            ));
        }
        for (c, field) in fields.iter().enumerate() {
            columns[c].push(parse_float(path, lineno, field)?);
        }
    }
    Ok((headers, columns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineshape::{frequency_grid, synthesize, LorentzianPeak};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("nvtherm-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn spectrum_round_trip_is_bit_exact() {
        let peak = LorentzianPeak::new(2.87e9, 9e6, 0.02).unwrap();
        let s = synthesize(&[peak], &frequency_grid(2.87e9, 5e8, 101), 1e-3, 5).unwrap();
        let path = tmp("spectrum_roundtrip.csv");
        save_spectrum_csv(&path, &s).unwrap();
        let loaded = load_spectrum_csv(&path).unwrap();
        assert_eq!(s, loaded);
    }

    #[test]
    fn three_row_file_loads() {
        let path = tmp("spectrum_three.csv");
        std::fs::write(&path, "frequency_hz,signal\n1e9,0.99\n2e9,1.0\n3e9,0.98\n").unwrap();
        let s = load_spectrum_csv(&path).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.freqs_hz()[1], 2e9);
    }

    #[test]
    fn decreasing_frequency_reports_the_offending_line() {
        let path = tmp("spectrum_bad.csv");
        std::fs::write(&path, "frequency_hz,signal\n1e9,0.99\n3e9,1.0\n2e9,0.98\n").unwrap();
        match load_spectrum_csv(&path).unwrap_err() {
            IoError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_header_and_bad_cell_are_reported() {
        let path = tmp("spectrum_header.csv");
        std::fs::write(&path, "freq,sig\n1e9,0.9\n").unwrap();
        assert!(matches!(
            load_spectrum_csv(&path).unwrap_err(),
            IoError::Parse { line: 1, .. }
        ));

        let path = tmp("spectrum_cell.csv");
        std::fs::write(&path, "frequency_hz,signal\n1e9,abc\n2e9,1.0\n").unwrap();
        assert!(matches!(
            load_spectrum_csv(&path).unwrap_err(),
            IoError::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn timeseries_round_trip_is_bit_exact() {
        let ts = TimeSeries::new(100.0, vec![0.1, -0.25, 1.0 / 3.0, 2.87e9]).unwrap();
        let path = tmp("ts_roundtrip.csv");
        save_timeseries_csv(&path, &ts).unwrap();
        let loaded = load_timeseries_csv(&path).unwrap();
        assert_eq!(ts, loaded);
    }

    #[test]
    fn timeseries_header_and_body_errors() {
        let path = tmp("ts_norate.csv");
        std::fs::write(&path, "voltage_v\n0.1\n0.2\n").unwrap();
        assert!(matches!(
            load_timeseries_csv(&path).unwrap_err(),
            IoError::Parse { line: 1, .. }
        ));

        let path = tmp("ts_empty.csv");
        std::fs::write(&path, "# sample_rate_hz=100\nvoltage_v\n").unwrap();
        let err = load_timeseries_csv(&path).unwrap_err();
        assert!(err.to_string().contains("at least 2 samples"), "{err}");
    }

    #[test]
    fn table_round_trip() {
        let path = tmp("table.csv");
        write_table(
            &path,
            &["temperature_k", "d_hz"],
            &[&[298.0, 303.0], &[2.87e9, 2.8696e9]],
        )
        .unwrap();
        let (headers, cols) = read_table(&path).unwrap();
        assert_eq!(headers, vec!["temperature_k", "d_hz"]);
        assert_eq!(cols[0], vec![298.0, 303.0]);
        assert_eq!(cols[1], vec![2.87e9, 2.8696e9]);
    }
}
