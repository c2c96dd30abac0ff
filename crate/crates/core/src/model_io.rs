//! Model files: a JSON manifest `<name>.mpq.json` describing the node list
//! and a little-endian `f32` blob `<name>.mpq.bin` holding every tensor.
//! The manifest carries the blob's SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{to_hex, BatchNorm, LayerOp, LayerRole, LayerSpec, ModelGraph, Node};
use crate::quant::DtypeTag;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const JSON_SUFFIX: &str = ".mpq.json";
const BIN_SUFFIX: &str = ".mpq.bin";

/// `(manifest, blob)` paths for `path`, which may name either file or the
/// common stem.
pub fn model_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(JSON_SUFFIX)
        .or_else(|| s.strip_suffix(BIN_SUFFIX))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}{JSON_SUFFIX}")), PathBuf::from(format!("{stem}{BIN_SUFFIX}")))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    groups: Vec<String>,
    blob: BlobInfo,
    nodes: Vec<NodeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobInfo {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NodeEntry {
    Layer(LayerEntry),
    PillarMax,
    Scatter { grid: [usize; 2] },
    Upsample2x,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    index: usize,
    name: String,
    op: LayerOp,
    relu: bool,
    role: LayerRole,
    precision: DtypeTag,
    weight: TensorRef,
    bias: TensorRef,
    bn: Option<BnEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    eps: f32,
    gamma: TensorRef,
    beta: TensorRef,
    mean: TensorRef,
    var: TensorRef,
}

/// Element offset and shape inside the blob.
#[derive(Debug, Serialize, Deserialize)]
struct TensorRef {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Default)]
struct BlobWriter {
    values: Vec<f32>,
}

impl BlobWriter {
    fn push(&mut self, shape: &[usize], data: &[f32]) -> TensorRef {
        let offset = self.values.len();
        self.values.extend_from_slice(data);
        TensorRef {
            shape: shape.to_vec(),
            offset,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

struct BlobReader {
    values: Vec<f32>,
}

impl BlobReader {
    fn tensor(&self, r: &TensorRef) -> Result<Tensor> {
        let len: usize = r.shape.iter().product();
        let end = r.offset.checked_add(len).filter(|&e| e <= self.values.len()).ok_or_else(|| {
            Error::Format(format!(
                "tensor at offset {} with shape {:?} runs past the end of the blob ({} values)",
                r.offset,
                r.shape,
                self.values.len()
            ))
        })?;
        Tensor::new(r.shape.clone(), self.values[r.offset..end].to_vec())
    }

    fn vector(&self, r: &TensorRef) -> Result<Vec<f32>> {
        Ok(self.tensor(r)?.into_data())
    }
}

pub fn save_model(graph: &ModelGraph, path: &Path) -> Result<()> {
    let (json_path, bin_path) = model_paths(path);
    let mut blob = BlobWriter::default();
    let nodes = graph
        .nodes()
        .iter()
        .map(|n| match n {
            Node::Layer(l) => NodeEntry::Layer(LayerEntry {
                index: l.index,
                name: l.name.clone(),
                op: l.op,
                relu: l.relu,
                role: l.role,
                precision: l.precision,
                weight: blob.push(l.weight.shape(), l.weight.data()),
                bias: blob.push(l.bias.shape(), l.bias.data()),
                bn: l.bn.as_ref().map(|bn| {
                    let c = [bn.channels()];
                    BnEntry {
                        eps: bn.eps,
                        gamma: blob.push(&c, &bn.gamma),
                        beta: blob.push(&c, &bn.beta),
                        mean: blob.push(&c, &bn.mean),
                        var: blob.push(&c, &bn.var),
                    }
                }),
            }),
            Node::PillarMax => NodeEntry::PillarMax,
            Node::Scatter { grid } => NodeEntry::Scatter { grid: *grid },
            Node::Upsample2x => NodeEntry::Upsample2x,
        })
        .collect();
    let bytes = blob.bytes();
    let file_name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let bin_name = file_name(&bin_path);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: bin_name.strip_suffix(BIN_SUFFIX).unwrap_or(&bin_name).to_string(),
        groups: graph.groups().to_vec(),
        blob: BlobInfo {
            file: bin_name,
            bytes: bytes.len() as u64,
            sha256: to_hex(&Sha256::digest(&bytes)),
        },
        nodes,
    };
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin_path, &bytes)?;
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let (json_path, _) = model_paths(path);
    let text = fs::read_to_string(&json_path)?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("manifest lacks a numeric format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let bin_path = json_path.with_file_name(&manifest.blob.file);
    let bytes = fs::read(&bin_path).map_err(|e| Error::Format(format!("blob {}: {e}", bin_path.display())))?;
    if bytes.len() as u64 != manifest.blob.bytes || bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "blob {} has {} bytes, manifest expects {}",
            bin_path.display(),
            bytes.len(),
            manifest.blob.bytes
        )));
    }
    let actual = to_hex(&Sha256::digest(&bytes));
    if actual != manifest.blob.sha256 {
        return Err(Error::Checksum {
            expected: manifest.blob.sha256,
            actual,
        });
    }
    let reader = BlobReader {
        values: bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    let nodes = manifest
        .nodes
        .iter()
        .map(|n| {
            Ok(match n {
                NodeEntry::Layer(l) => Node::Layer(LayerSpec {
                    index: l.index,
                    name: l.name.clone(),
                    op: l.op,
                    weight: reader.tensor(&l.weight)?,
                    bias: reader.tensor(&l.bias)?,
                    bn: l
                        .bn
                        .as_ref()
                        .map(|b| -> Result<BatchNorm> {
                            Ok(BatchNorm {
                                gamma: reader.vector(&b.gamma)?,
                                beta: reader.vector(&b.beta)?,
                                mean: reader.vector(&b.mean)?,
                                var: reader.vector(&b.var)?,
                                eps: b.eps,
                            })
                        })
                        .transpose()?,
                    relu: l.relu,
                    role: l.role,
                    precision: l.precision,
                }),
                NodeEntry::PillarMax => Node::PillarMax,
                NodeEntry::Scatter { grid } => Node::Scatter { grid: *grid },
                NodeEntry::Upsample2x => Node::Upsample2x,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::new(nodes, manifest.groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;

    fn sample_graph() -> ModelGraph {
        let conv = LayerSpec {
            index: 1,
            name: "backbone.blocks.0.0".into(),
            op: LayerOp::Conv2d {
                params: ConvParams::new(2, 1),
            },
            weight: Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f32 * 0.1).sin()),
            bias: Tensor::from_fn(&[2], |i| i as f32 * 1e-7),
            bn: Some(BatchNorm {
                gamma: vec![1.5, 0.5],
                beta: vec![0.1, -0.1],
                mean: vec![0.0, 0.2],
                var: vec![1.0, 2.0],
                eps: 1e-3,
            }),
            relu: true,
            role: LayerRole::Trunk,
            precision: DtypeTag::Fp16,
        };
        ModelGraph::new(vec![Node::Layer(conv), Node::Upsample2x], vec!["backbone".into()]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = sample_graph();
        save_model(&g, &dir.path().join("m")).unwrap();
        assert!(dir.path().join("m.mpq.json").exists());
        let back = load_model(&dir.path().join("m.mpq.json")).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn missing_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&sample_graph(), &dir.path().join("m")).unwrap();
        fs::remove_file(dir.path().join("m.mpq.bin")).unwrap();
        assert!(matches!(load_model(&dir.path().join("m")), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_tampered_blobs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        save_model(&sample_graph(), &stem).unwrap();
        let bin = dir.path().join("m.mpq.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_model(&stem), Err(Error::Checksum { .. })));
        bytes.truncate(bytes.len() - 4);
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_model(&stem), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_version_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        save_model(&sample_graph(), &stem).unwrap();
        let json = dir.path().join("m.mpq.json");
        let text = fs::read_to_string(&json).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&json, text).unwrap();
        assert!(matches!(
            load_model(&stem),
            Err(Error::UnsupportedVersion { found: 7, supported: 1 })
        ));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.mpq.json"), "{\"format_version\": 1, \"nodes\": 3}").unwrap();
        assert!(matches!(load_model(&dir.path().join("m")), Err(Error::Format(_))));
    }
}
