//! On-disk layout of an experiment directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use segsr_core::Regime;

use crate::config::Method;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

pub fn subject_name(index: usize) -> String {
    format!("subject_{index:03}")
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.json")
    }

    /// Volume stem (no extension) of an HR phantom.
    pub fn hr(&self, subject: usize) -> PathBuf {
        self.root.join("data").join("hr").join(subject_name(subject))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model_dir().join("vae.ckpt")
    }

    pub fn loss_history(&self) -> PathBuf {
        self.model_dir().join("loss_history.csv")
    }

    pub fn train_report(&self) -> PathBuf {
        self.model_dir().join("report.json")
    }

    pub fn lr_dir(&self, regime: Regime) -> PathBuf {
        self.root.join("lr").join(regime.name())
    }

    pub fn lr(&self, regime: Regime, subject: usize) -> PathBuf {
        self.lr_dir(regime).join(subject_name(subject))
    }

    pub fn lr_motion(&self, regime: Regime, subject: usize) -> PathBuf {
        self.lr_dir(regime).join(format!("{}_motion.json", subject_name(subject)))
    }

    pub fn sr_dir(&self, regime: Regime, method: Method) -> PathBuf {
        self.root.join("sr").join(regime.name()).join(method.name())
    }

    pub fn sr(&self, regime: Regime, method: Method, subject: usize) -> PathBuf {
        self.sr_dir(regime, method).join(subject_name(subject))
    }

    pub fn sr_file(&self, regime: Regime, method: Method, subject: usize, suffix: &str) -> PathBuf {
        self.sr_dir(regime, method).join(format!("{}_{suffix}", subject_name(subject)))
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(segsr_core::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path, hint: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing { path: path.to_path_buf(), hint: hint.into() },
        _ => CliError::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
