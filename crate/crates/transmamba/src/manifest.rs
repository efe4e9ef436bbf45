//! One manifest per run directory.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub git_describe: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub out_dir: PathBuf,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// `git describe --always --dirty`, or `unknown` outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>, seed: u64, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            git_describe: git_describe(),
            started_unix: now_unix(),
            finished_unix: 0.0,
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "command": self.command,
            "config_path": self.config_path.as_ref().map(|p| p.display().to_string()),
            "seed": self.seed,
            "git_describe": self.git_describe,
            "started_unix": self.started_unix,
            "finished_unix": self.finished_unix,
            "out_dir": self.out_dir.display().to_string(),
        })
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.finished_unix = now_unix();
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.to_json()).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

/// Creates `dir`, refusing one that already has contents.
pub fn fresh_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() {
            return Err(CliError::Usage(format!(
                "{} is not empty; choose a new --out directory",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
