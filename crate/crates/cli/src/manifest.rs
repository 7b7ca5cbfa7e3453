//! The run manifest: every resolved setting, input hashes, and artifact
//! paths, written next to the artifacts so a run can be reproduced from one
//! file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ingeo_core::procedural::CameraRing;
use ingeo_core::train::TrainConfig;
use ingeo_core::SceneId;

/// Where the training data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SceneSpec {
    Procedural {
        id: SceneId,
        seed: u64,
        ring: CameraRing,
    },
    Directory {
        path: PathBuf,
        downscale: u32,
        bbox_scale: f32,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub scene: SceneSpec,
    pub config: TrainConfig,
    /// sha256 of input files (prior cloud, grid snapshot, transforms json).
    pub input_hashes: Vec<(String, String)>,
    pub prior_path: Option<PathBuf>,
    pub artifacts: ArtifactPaths,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub manifest: PathBuf,
    pub metrics_csv: PathBuf,
    pub model: PathBuf,
    pub grid: PathBuf,
    pub checkpoint_pngs: Vec<PathBuf>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let data = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&data);
    Ok(format!("{:x}", hasher.finalize()))
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&raw).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
