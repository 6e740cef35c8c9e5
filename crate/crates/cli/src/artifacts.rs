use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use trm_core::training::TrainRecord;
use trm_core::TrmError;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REGISTRY_FILE: &str = "registry.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUBMISSION_FILE: &str = "submission.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const SCORES_JSON: &str = "scores.json";

/// A run's output directory.
pub struct OutputDir {
    pub path: PathBuf,
}

impl OutputDir {
    /// Refuses a non-empty existing directory unless `force` is set. Nothing
    /// is created until [`OutputDir::create`].
    pub fn claim(path: &Path, force: bool) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() {
                bail!("{} exists and is not a directory", path.display());
            }
            let occupied = fs::read_dir(path)?.next().is_some();
            if occupied && !force {
                bail!("{} already exists; pass --force to overwrite", path.display());
            }
        }
        Ok(OutputDir { path: path.to_path_buf() })
    }

    /// Creates the directory and stores the run's config text.
    pub fn create(&self, config_text: &str) -> Result<()> {
        fs::create_dir_all(&self.path).with_context(|| format!("creating {}", self.path.display()))?;
        self.write(CONFIG_FILE, config_text.as_bytes())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)?.as_bytes())
    }

    pub fn metrics(&self) -> Result<MetricsLog> {
        let path = self.file(METRICS_FILE);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(MetricsLog {
            out: BufWriter::new(file),
            path,
        })
    }
}

/// JSON-lines stream of training records.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn append(&mut self, record: &TrainRecord) -> trm_core::Result<()> {
        let written = serde_json::to_writer(&mut self.out, record)
            .map_err(std::io::Error::from)
            .and_then(|()| self.out.write_all(b"\n"))
            .and_then(|()| self.out.flush());
        written.map_err(|source| TrmError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScoreRow {
    pub k: usize,
    pub pass_at_k: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScoreTable {
    pub n_tasks: usize,
    pub n_augs: usize,
    pub halting_weighted: bool,
    pub scores: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,pass_at_k\n");
        for row in &self.scores {
            out.push_str(&format!("{},{}\n", row.k, row.pass_at_k));
        }
        out
    }

    pub fn save(&self, dir: &OutputDir) -> Result<()> {
        dir.write(SCORES_CSV, self.to_csv().as_bytes())?;
        dir.write_json(SCORES_JSON, self)
    }
}
