use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use np_robust::config::KeyValues;

/// Record of one command: everything needed to rerun it.
#[derive(Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Fully resolved settings, defaults included.
    pub config: KeyValues,
    pub datasets: Vec<(String, String)>,
    pub checkpoints: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            ..Default::default()
        }
    }

    pub fn path(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("{command}-run.manifest"))
    }

    pub fn to_kv(&self, wall_clock: Duration) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("command", &self.command);
        kv.set("seed", self.seed);
        for (k, v) in self.config.iter() {
            kv.set(&format!("config.{k}"), v);
        }
        for (split, fp) in &self.datasets {
            kv.set(&format!("dataset.{split}"), fp);
        }
        for (i, p) in self.checkpoints.iter().enumerate() {
            kv.set(&format!("checkpoint.{i}"), p.display());
        }
        for (i, p) in self.outputs.iter().enumerate() {
            kv.set(&format!("output.{i}"), p.display());
        }
        kv.set("wall_clock_secs", format!("{:.3}", wall_clock.as_secs_f64()));
        kv
    }

    pub fn write(&self, out_dir: &Path, wall_clock: Duration) -> Result<PathBuf> {
        let path = Self::path(out_dir, &self.command);
        self.to_kv(wall_clock)
            .write(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
