//! Container (`manifest.json` + `signal.bin`) and CSV ingestion.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Recording, SignalError, SignalResult};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ContainerManifest {
    pub channels: Vec<String>,
    pub fs: f64,
    pub dtype: String,
    pub samples: usize,
    /// Parameters of every processing step applied, in order.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub provenance: serde_json::Value,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SignalError + '_ {
    move |source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ingest(path: &Path, location: impl Into<String>, msg: impl Into<String>) -> SignalError {
    SignalError::Ingest {
        path: path.to_path_buf(),
        location: location.into(),
        msg: msg.into(),
    }
}

/// Container directory or `.csv` file.
pub fn load_recording(path: &Path) -> SignalResult<Recording> {
    if path.is_dir() {
        read_container(path).map(|(r, _)| r)
    } else {
        read_csv(path)
    }
}

pub fn read_container(dir: &Path) -> SignalResult<(Recording, ContainerManifest)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: ContainerManifest = serde_json::from_str(&text).map_err(|e| {
        ingest(
            &mpath,
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if manifest.dtype != "f32le" {
        return Err(ingest(&mpath, "dtype", format!("unsupported dtype `{}`", manifest.dtype)));
    }
    let bpath = dir.join("signal.bin");
    let bytes = fs::read(&bpath).map_err(io(&bpath))?;
    let c = manifest.channels.len();
    let t = manifest.samples;
    let expected = 4 * c * t;
    if bytes.len() != expected {
        return Err(ingest(
            &bpath,
            format!("byte {}", bytes.len().min(expected)),
            format!(
                "extent mismatch: manifest declares {c} channels x {t} samples ({expected} bytes), file holds {} bytes",
                bytes.len()
            ),
        ));
    }
    let mut data = vec![Vec::with_capacity(t); c];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(ingest(&bpath, format!("byte {}", 4 * i), "non-finite sample"));
        }
        data[i / t].push(v as f64);
    }
    let rec = Recording::new(manifest.channels.clone(), manifest.fs, data)
        .map_err(|e| ingest(&mpath, "manifest", e.to_string()))?;
    Ok((rec, manifest))
}

pub fn write_container(
    dir: &Path,
    rec: &Recording,
    provenance: serde_json::Value,
) -> SignalResult<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest = ContainerManifest {
        channels: rec.channels().to_vec(),
        fs: rec.fs(),
        dtype: "f32le".into(),
        samples: rec.n_samples(),
        provenance,
    };
    let mut bytes = Vec::with_capacity(4 * rec.n_channels() * rec.n_samples());
    for row in rec.data() {
        for v in row {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(io(&mpath))?;
    let bpath = dir.join("signal.bin");
    fs::write(&bpath, bytes).map_err(io(&bpath))
}

/// CSV with a mandatory header: first column time or index (ignored), then
/// one column per channel. Sampling rate is inferred from the first column
/// when it holds seconds; pass through [`Recording::new`] otherwise.
pub fn read_csv(path: &Path) -> SignalResult<Recording> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(path, "open", e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| ingest(path, "line 1", e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(ingest(path, "line 1", "header needs a time column and at least one channel"));
    }
    let channels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut times = Vec::new();
    let mut data = vec![Vec::new(); channels.len()];
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ingest(path, format!("line {line}"), e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(ingest(
                path,
                format!("line {line}"),
                format!("{} fields, header has {}", rec.len(), headers.len()),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                ingest(path, format!("line {line} column {}", j + 1), format!("`{field}` is not a number"))
            })?;
            if !v.is_finite() {
                return Err(ingest(path, format!("line {line} column {}", j + 1), "non-finite sample"));
            }
            if j == 0 {
                times.push(v);
            } else {
                data[j - 1].push(v);
            }
        }
    }
    let fs = infer_fs(&headers[0], &times);
    Recording::new(channels, fs, data).map_err(|e| ingest(path, "body", e.to_string()))
}

/// A `t`/`time` column in seconds gives `1/dt`; an index column falls back to
/// 200 Hz, the working rate of the pipeline.
fn infer_fs(name: &str, times: &[f64]) -> f64 {
    let name = name.to_ascii_lowercase();
    if (name == "t" || name.starts_with("time")) && times.len() >= 2 {
        let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        if dt > 0.0 && dt < 1.0 {
            return (1.0 / dt * 1e6).round() / 1e6;
        }
    }
    200.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(c: usize, t: usize, fs: f64) -> Recording {
        let labels = (0..c).map(|i| format!("ch{i}")).collect();
        let data = (0..c)
            .map(|ci| (0..t).map(|j| (ci * t + j) as f64 * 0.25).collect())
            .collect();
        Recording::new(labels, fs, data).unwrap()
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = rec(2, 400, 200.0);
        write_container(dir.path(), &r, serde_json::Value::Null).unwrap();
        let back = load_recording(dir.path()).unwrap();
        assert_eq!(back.n_channels(), 2);
        assert_eq!(back.n_samples(), 400);
        assert_eq!(back.fs(), 200.0);
        assert_eq!(back, r);
    }

    #[test]
    fn extent_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let r = rec(2, 50, 200.0);
        write_container(dir.path(), &r, serde_json::Value::Null).unwrap();
        let m = dir.path().join("manifest.json");
        let text = fs::read_to_string(&m).unwrap().replace("\"ch1\"", "\"ch1\", \"ch2\"");
        fs::write(&m, text).unwrap();
        let err = load_recording(dir.path()).unwrap_err();
        assert!(err.to_string().contains("extent mismatch"), "{err}");
    }

    #[test]
    fn non_finite_sample_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_container(dir.path(), &rec(1, 8, 100.0), serde_json::Value::Null).unwrap();
        let b = dir.path().join("signal.bin");
        let mut bytes = fs::read(&b).unwrap();
        bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&b, bytes).unwrap();
        let err = load_recording(dir.path()).unwrap_err().to_string();
        assert!(err.contains("byte 12"), "{err}");
    }

    #[test]
    fn csv_with_time_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let mut s = String::from("t,Fz,Cz\n");
        for i in 0..100 {
            s.push_str(&format!("{},{},{}\n", i as f64 / 250.0, i, -(i as i64)));
        }
        fs::write(&p, s).unwrap();
        let r = load_recording(&p).unwrap();
        assert_eq!(r.n_channels(), 2);
        assert_eq!(r.n_samples(), 100);
        assert_eq!(r.channels(), &["Fz".to_string(), "Cz".to_string()]);
        assert!((r.fs() - 250.0).abs() < 1e-9);
    }

    #[test]
    fn csv_bad_number_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "t,Fz\n0,1\n0.005,abc\n").unwrap();
        let err = load_recording(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
