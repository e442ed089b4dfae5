//! Experiment configuration: one TOML file describes a data source, the SLAM
//! settings and how to evaluate, so every run directory is self-describing.
//!
//! ```toml
//! seed = 3
//! depth_mode = "noisy"
//! preset = "monogs_estimated_depth"
//!
//! [sim]
//! n_frames = 30
//!
//! [slam]
//! tracking_iters = 100
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{hex_digest, DepthMode};
use crate::error::{Error, Result};
use crate::evalkit::Alignment;
use crate::losses::NflPreset;
use crate::simulator::SimConfig;
use crate::slam::SlamConfig;

/// Name of the resolved config copy written into every output directory.
pub const CONFIG_FILE: &str = "config.toml";
/// Hex SHA-256 of [`CONFIG_FILE`].
pub const DIGEST_FILE: &str = "config.sha256";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub alignment: Alignment,
    /// Pixel stride of the ground-truth cloud used for Chamfer.
    pub chamfer_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alignment: Alignment::Se3,
            chamfer_stride: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the simulator; `[sim].seed` must agree with it when both are given.
    pub seed: u64,
    /// Existing sequence on disk. Exactly one of `dataset` and `sim`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    pub depth_mode: DepthMode,
    /// Named loss weighting; overrides `[slam.weights]` (which may then only repeat it).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<NflPreset>,
    pub slam: SlamConfig,
    pub eval: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    pub threads: usize,
}

impl ExperimentConfig {
    /// Strict parse followed by preset/seed resolution. Does not touch the
    /// file system; call [`ExperimentConfig::validate`] for that.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let explicit_weights = table
            .get("slam")
            .and_then(|s| s.as_table())
            .is_some_and(|s| s.contains_key("weights"));
        if let Some(p) = cfg.preset {
            if explicit_weights && cfg.slam.weights != p.weights() {
                return Err(Error::Config(format!(
                    "preset {:?} conflicts with explicit [slam.weights]; keep one of them",
                    p.name()
                )));
            }
            cfg.slam.weights = p.weights();
        }
        let sim_seed = table
            .get("sim")
            .and_then(|s| s.as_table())
            .and_then(|s| s.get("seed"))
            .and_then(|v| v.as_integer());
        let top_seed = table.get("seed").and_then(|v| v.as_integer());
        if let Some(sim) = &mut cfg.sim {
            match (top_seed, sim_seed) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::Config(format!("seed = {a} disagrees with [sim] seed = {b}")));
                }
                (None, Some(_)) => cfg.seed = sim.seed,
                _ => sim.seed = cfg.seed,
            }
        }
        if cfg.threads == 0 {
            cfg.threads = 1;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(sim) = &mut self.sim {
            sim.seed = seed;
        }
    }

    /// Checks the invariants that need no computation: one data source,
    /// referenced paths present, depth available for the requested mode.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.sim) {
            (Some(_), Some(_)) => return Err(Error::Config("both `dataset` and `[sim]` given; choose one".into())),
            (None, None) => return Err(Error::Config("no data source: set `dataset` or add a `[sim]` table".into())),
            (Some(dir), None) => {
                if !dir.join("intrinsics.json").is_file() {
                    return Err(Error::Config(format!("{} is not a dataset directory", dir.display())));
                }
                if let Some(d) = self.depth_mode.dir_name() {
                    if !dir.join(d).is_dir() {
                        return Err(Error::Config(format!(
                            "depth_mode {:?} needs {}",
                            self.depth_mode,
                            dir.join(d).display()
                        )));
                    }
                }
            }
            (None, Some(sim)) => {
                sim.intrinsics().map_err(|e| Error::Config(e.to_string()))?;
                if sim.n_frames < 2 {
                    return Err(Error::Config("sim.n_frames must be at least 2".into()));
                }
                if sim.seed != self.seed {
                    return Err(Error::Config(format!("seed = {} disagrees with [sim] seed = {}", self.seed, sim.seed)));
                }
                sim.lighting.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        if let Some(p) = self.preset {
            if self.slam.weights != p.weights() {
                return Err(Error::Config(format!("weights differ from preset {:?}", p.name())));
            }
        }
        if self.eval.chamfer_stride == 0 {
            return Err(Error::Config("eval.chamfer_stride must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.slam.validate()
    }

    /// Writes the resolved config and its digest into `dir`; returns the digest.
    pub fn write_resolved(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = self.to_toml();
        let digest = hex_digest(text.as_bytes());
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(DIGEST_FILE);
        fs::write(&path, format!("{digest}\n")).map_err(|e| Error::io(&path, e))?;
        Ok(digest)
    }
}

/// Reads back a config copy and checks it against its digest.
pub fn read_resolved(dir: &Path) -> Result<(ExperimentConfig, String)> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let digest_path = dir.join(DIGEST_FILE);
    let stored = fs::read_to_string(&digest_path).map_err(|e| Error::io(&digest_path, e))?;
    let digest = hex_digest(text.as_bytes());
    if stored.trim() != digest {
        return Err(Error::schema(digest_path, "digest does not match config.toml"));
    }
    let cfg = ExperimentConfig::from_toml(&text).map_err(|e| Error::schema(&path, e.to_string()))?;
    Ok((cfg, digest))
}
