//! Run-directory layout and the single-command lock.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use crate::failure::Failure;

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn train_path(&self) -> PathBuf {
        self.root.join("train.tsv")
    }

    pub fn test_path(&self) -> PathBuf {
        self.root.join("test.tsv")
    }

    pub fn plan_path(&self) -> PathBuf {
        self.root.join("plan.tsv")
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.root.join("backbone.bin")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn model_path(&self, shard: usize) -> PathBuf {
        self.models().join(format!("shard{shard}.model"))
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.csv")
    }

    pub fn requests_path(&self) -> PathBuf {
        self.root.join("requests.txt")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Take the lock, creating the directory if `create` is set.
    pub fn lock(&self, create: bool) -> Result<RunLock, Failure> {
        if create {
            std::fs::create_dir_all(&self.root)?;
        } else if !self.root.is_dir() {
            return Err(Failure::State(format!("run directory {} does not exist", self.root.display())));
        }
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::State(format!(
                "run directory {} is locked by another command (remove {} if stale)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
