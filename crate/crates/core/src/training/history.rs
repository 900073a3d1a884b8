use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::schedule::Action;
use crate::error::{Error, Result};

/// Validation metrics logged per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub auc_macro: f64,
    pub map_macro: f64,
}

/// One line of `history.jsonl`. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-batch value of each loss component over the epoch.
    pub train: BTreeMap<String, f64>,
    pub val_loss: f64,
    pub val: ValMetrics,
    pub action: Action,
    pub best_val_loss: f64,
}

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const HISTORY: &str = "history.jsonl";
pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const REPORT: &str = "report.json";

/// An output directory holding one run's artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create `root`, refusing to reuse a non-empty directory unless `force`.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            let occupied = fs::read_dir(root)?.next().is_some();
            if occupied && !force {
                return Err(Error::RunDirExists(root.to_path_buf()));
            }
            for name in [HISTORY, BEST, LAST, REPORT, CONFIG_SNAPSHOT] {
                let p = root.join(name);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    /// Reopen an existing run for resumption.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(LAST).is_file() {
            return Err(Error::NotFound(format!("{} has no {LAST} to resume from", root.display())));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_config(&self, text: &str) -> Result<()> {
        fs::write(self.join(CONFIG_SNAPSHOT), text)?;
        Ok(())
    }

    /// Rewrite the history file with `records`.
    pub fn write_history(&self, records: &[EpochRecord]) -> Result<()> {
        let mut out = Vec::new();
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        write_atomic(&self.join(HISTORY), &out)
    }

    pub fn append_history(&self, record: &EpochRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.join(HISTORY))?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    pub fn save(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save(&self.join(name))
    }
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
