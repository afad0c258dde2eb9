//! Run directory layout: `config.json`, `metrics.csv`, `checkpoints/`,
//! `artifacts/`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const METRICS_HEADER: &str = "step,loss_total,loss_text,loss_eeg,loss_orth,lr";
pub const LATEST: &str = "latest";
pub const FINAL: &str = "final";

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

/// One metrics row; stage-1 rows leave the language-model columns empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_text: Option<f64>,
    pub loss_eeg: Option<f64>,
    pub loss_orth: Option<f64>,
    pub lr: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl RunDir {
    pub fn create(root: &Path, cfg: &RunConfig) -> CliResult<Self> {
        for sub in ["checkpoints", "artifacts"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let text = serde_json::to_string_pretty(cfg).expect("config serializes");
        fs::write(root.join("config.json"), text)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    /// Starts a fresh log, or keeps the rows up to `keep_through` when
    /// resuming so replayed steps are not duplicated.
    pub fn reset_metrics(&self, keep_through: Option<u64>) -> CliResult<()> {
        let path = self.metrics_path();
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        if let (Some(last), Ok(text)) = (keep_through, fs::read_to_string(&path)) {
            for line in text.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= last) {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        fs::write(&path, out)?;
        Ok(())
    }

    pub fn append_metrics(&self, r: &MetricsRow) -> CliResult<()> {
        let mut f = OpenOptions::new().append(true).open(self.metrics_path())?;
        writeln!(
            f,
            "{},{:e},{},{},{},{:e}",
            r.step,
            r.loss_total,
            opt(r.loss_text),
            opt(r.loss_eeg),
            opt(r.loss_orth),
            r.lr
        )?;
        Ok(())
    }

    pub fn write_json(&self, name: &str, v: &serde_json::Value) -> CliResult<()> {
        let text = serde_json::to_string_pretty(v).expect("json serializes");
        fs::write(self.root.join(name), text)?;
        Ok(())
    }
}

/// A checkpoint directory, or a run directory whose final (else latest)
/// checkpoint is used.
pub fn resolve_checkpoint(path: &Path) -> CliResult<PathBuf> {
    if path.join(eegtok_core::checkpoint::MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    for name in [FINAL, LATEST] {
        let p = path.join("checkpoints").join(name);
        if p.join(eegtok_core::checkpoint::MANIFEST).is_file() {
            return Ok(p);
        }
    }
    Err(CliError::Dependency(format!("no checkpoint found at {}", path.display())))
}

/// Parsed `metrics.csv` rows (empty fields read as `None`).
pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let f = |i: usize| -> CliResult<Option<f64>> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| CliError::Data(format!("bad metrics field `{s}`")))
        };
        out.push(MetricsRow {
            step: rec.get(0).and_then(|s| s.parse().ok()).unwrap_or(0),
            loss_total: f(1)?.unwrap_or(f64::NAN),
            loss_text: f(2)?,
            loss_eeg: f(3)?,
            loss_orth: f(4)?,
            lr: f(5)?.unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}
