//! Run-record persistence: one JSON file per run under `runs/` and an
//! append-only `results.csv` of flat rows.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::harness::experiment::RunRecord;

pub const CSV_HEADER: [&str; 15] = [
    "run_hash",
    "cell",
    "seed",
    "method",
    "accuracy",
    "f1",
    "ace",
    "raulc",
    "mean_entropy",
    "roc_auc",
    "pr_auc",
    "fpr95",
    "num_members",
    "divergences",
    "wall_clock_seconds",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(r: &RunRecord) -> Vec<String> {
    vec![
        r.run_hash.clone(),
        r.cell.clone(),
        r.seed.to_string(),
        r.method.as_str().to_string(),
        r.evaluation.accuracy.to_string(),
        r.evaluation.f1.to_string(),
        r.evaluation.ace.to_string(),
        opt(r.evaluation.raulc),
        r.evaluation.mean_entropy.to_string(),
        opt(r.ood.map(|o| o.roc_auc)),
        opt(r.ood.map(|o| o.pr_auc)),
        opt(r.ood.map(|o| o.fpr95)),
        r.num_members.to_string(),
        r.diagnostics
            .as_ref()
            .map(|d| d.divergences.to_string())
            .unwrap_or_default(),
        r.wall_clock_seconds.to_string(),
    ]
}

/// Directory of persisted run records. CSV appends are serialized through an
/// internal lock so concurrent grid cells can share one store.
pub struct RecordStore {
    dir: PathBuf,
    csv_lock: Mutex<()>,
}

impl RecordStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let runs = dir.join("runs");
        fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        Ok(Self {
            dir,
            csv_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn csv_path(&self) -> PathBuf {
        self.dir.join("results.csv")
    }

    pub fn record_path(&self, run_hash: &str) -> PathBuf {
        self.dir.join("runs").join(format!("{run_hash}.json"))
    }

    pub fn contains(&self, run_hash: &str) -> bool {
        self.record_path(run_hash).exists()
    }

    pub fn load(&self, run_hash: &str) -> Result<Option<RunRecord>> {
        let path = self.record_path(run_hash);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Writes the JSON record atomically and appends its CSV row.
    pub fn save(&self, record: &RunRecord) -> Result<()> {
        let path = self.record_path(&record.run_hash);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(record)?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.append_csv(record)
    }

    fn append_csv(&self, record: &RunRecord) -> Result<()> {
        let _guard = self.csv_lock.lock().expect("csv lock poisoned");
        let path = self.csv_path();
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let to_err = |e: csv::Error| Error::Serialization(e.to_string());
        if fresh {
            w.write_record(CSV_HEADER).map_err(to_err)?;
        }
        w.write_record(csv_row(record)).map_err(to_err)?;
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Every persisted record, ordered by `(cell, seed, run_hash)`.
    pub fn load_all(&self) -> Result<Vec<RunRecord>> {
        let runs = self.dir.join("runs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))? {
            let path = entry.map_err(|e| Error::io(&runs, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            out.push(serde_json::from_str::<RunRecord>(&text)?);
        }
        out.sort_by(|a, b| (&a.cell, a.seed, &a.run_hash).cmp(&(&b.cell, b.seed, &b.run_hash)));
        Ok(out)
    }
}
