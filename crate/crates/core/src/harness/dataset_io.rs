//! Datasets on disk: one JSON object per line per scene, plus a manifest
//! recording the generator config, seed and content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::to_hex;
use crate::harness::scene::{DatasetConfig, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub file: String,
    pub scenes: usize,
    pub seed: u64,
    pub config: DatasetConfig,
    pub sha256: String,
}

pub fn scenes_to_jsonl(scenes: &[Scene]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn scenes_from_jsonl(text: &str) -> Result<Vec<Scene>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("scene line {}: {e}", i + 1))))
        .collect()
}

/// Manifest path next to a `.jsonl` dataset.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Writes `path` (JSONL) and its manifest.
pub fn save_dataset(path: &Path, scenes: &[Scene], cfg: &DatasetConfig, seed: u64) -> Result<DatasetManifest> {
    let body = scenes_to_jsonl(scenes)?;
    let manifest = DatasetManifest {
        file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        scenes: scenes.len(),
        seed,
        config: cfg.clone(),
        sha256: to_hex(&Sha256::digest(body.as_bytes())),
    };
    fs::write(path, body)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a JSONL dataset; when a manifest sits beside it the hash and scene
/// count are checked.
pub fn load_dataset(path: &Path) -> Result<(Vec<Scene>, Option<DatasetManifest>)> {
    let body = fs::read_to_string(path)?;
    let scenes = scenes_from_jsonl(&body)?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        let digest = to_hex(&Sha256::digest(body.as_bytes()));
        if m.sha256 != digest || m.scenes != scenes.len() {
            return Err(Error::Format(format!("{} does not match its manifest", path.display())));
        }
        Some(m)
    } else {
        None
    };
    Ok((scenes, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::generate_dataset;

    #[test]
    fn round_trip_is_exact() {
        let cfg = DatasetConfig {
            size: 20,
            outlier_rate: 0.5,
            ..DatasetConfig::default()
        };
        let scenes = generate_dataset(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let m = save_dataset(&path, &scenes, &cfg, 11).unwrap();
        assert_eq!(m.scenes, 20);
        let (back, manifest) = load_dataset(&path).unwrap();
        assert_eq!(back, scenes);
        assert_eq!(manifest.unwrap(), m);
        let first = fs::read(&path).unwrap();
        save_dataset(&path, &back, &cfg, 11).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn tampering_is_detected() {
        let cfg = DatasetConfig {
            size: 2,
            ..DatasetConfig::default()
        };
        let scenes = generate_dataset(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &scenes, &cfg, 1).unwrap();
        fs::write(&path, scenes_to_jsonl(&scenes[..1]).unwrap()).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
        assert!(scenes_from_jsonl("{not json}\n").is_err());
    }
}
