//! Versioned binary checkpoints for model weights and adapters.
//!
//! Layout: a 4-byte magic, a format version, a JSON header describing the
//! configs and the tensor table (names and shapes, in enumeration order),
//! then the raw weight blocks as little-endian f32 in the same order.
//! Loading verifies magic, version, and exact payload length, so a
//! truncated or foreign file fails loudly instead of producing a silently
//! broken model.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoraAdapter, LoraConfig, NamedTensor, Params, TransformerConfig};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"RLAB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: TransformerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    lora: Option<LoraConfig>,
    tensors: Vec<TensorMeta>,
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedArtifact { path: path.display().to_string(), detail: detail.into() }
}

/// Open a file that an earlier pipeline stage should have produced,
/// pointing at the producing subcommand when it is missing.
pub fn open_artifact(path: &Path, produced_by: &str) -> Result<fs::File> {
    match fs::File::open(path) {
        Ok(f) => Ok(f),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            path: path.display().to_string(),
            produced_by: produced_by.to_string(),
        }),
        Err(e) => Err(e.into()),
    }
}

fn write_container(path: &Path, header: &Header, blocks: &[&[f32]]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let hjson = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for block in blocks {
        for &x in *block {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_container(path: &Path, produced_by: &str) -> Result<(Header, Vec<f32>)> {
    let mut f = open_artifact(path, produced_by)?;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() < 12 {
        return Err(malformed(path, format!("only {} bytes", raw.len())));
    }
    if &raw[0..4] != MAGIC {
        return Err(malformed(path, "bad magic; not a weight checkpoint"));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            path: path.display().to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
    if raw.len() < 12 + hlen {
        return Err(malformed(path, "header extends past end of file"));
    }
    let header: Header = serde_json::from_slice(&raw[12..12 + hlen])
        .map_err(|e| malformed(path, format!("unreadable header: {e}")))?;
    let body = &raw[12 + hlen..];
    let expect: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if body.len() != expect * 4 {
        return Err(malformed(
            path,
            format!("payload is {} bytes, tensor table implies {}", body.len(), expect * 4),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

fn split_tensors(header: &Header, data: Vec<f32>) -> Vec<NamedTensor<f32>> {
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        out.push(NamedTensor {
            name: meta.name.clone(),
            tensor: Tensor { shape: meta.shape.clone(), data: data[off..off + n].to_vec() },
        });
        off += n;
    }
    out
}

pub fn save_params(path: &Path, params: &Params<f32>) -> Result<()> {
    let header = Header {
        kind: "base".into(),
        config: params.config,
        lora: None,
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorMeta { name: t.name.clone(), shape: t.tensor.shape.clone() })
            .collect(),
    };
    let blocks: Vec<&[f32]> = params.tensors.iter().map(|t| t.tensor.data.as_slice()).collect();
    write_container(path, &header, &blocks)
}

pub fn load_params(path: &Path, produced_by: &str) -> Result<Params<f32>> {
    let (header, data) = read_container(path, produced_by)?;
    if header.kind != "base" {
        return Err(malformed(path, format!("expected base weights, found `{}`", header.kind)));
    }
    Ok(Params { config: header.config, tensors: split_tensors(&header, data) })
}

pub fn save_adapter(path: &Path, model: &TransformerConfig, adapter: &LoraAdapter<f32>) -> Result<()> {
    let header = Header {
        kind: "adapter".into(),
        config: *model,
        lora: Some(adapter.config.clone()),
        tensors: adapter
            .tensors
            .iter()
            .map(|t| TensorMeta { name: t.name.clone(), shape: t.tensor.shape.clone() })
            .collect(),
    };
    let blocks: Vec<&[f32]> = adapter.tensors.iter().map(|t| t.tensor.data.as_slice()).collect();
    write_container(path, &header, &blocks)
}

pub fn load_adapter(path: &Path, produced_by: &str) -> Result<(TransformerConfig, LoraAdapter<f32>)> {
    let (header, data) = read_container(path, produced_by)?;
    let lora = header
        .lora
        .clone()
        .ok_or_else(|| malformed(path, "adapter checkpoint without adapter config"))?;
    if header.kind != "adapter" {
        return Err(malformed(path, format!("expected adapter weights, found `{}`", header.kind)));
    }
    let tensors = split_tensors(&header, data);
    Ok((header.config, LoraAdapter { config: lora, tensors }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LoraTarget;

    fn tiny() -> TransformerConfig {
        TransformerConfig { layers: 2, heads: 2, d_model: 16, d_ff: 32, vocab: 64, context: 32 }
    }

    #[test]
    fn base_weights_round_trip_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.bin");
        let params: Params<f32> = Params::init(&tiny(), 31).unwrap();
        save_params(&path, &params).unwrap();
        let loaded = load_params(&path, "pretrain-base").unwrap();
        assert_eq!(params.config, loaded.config);
        assert_eq!(params.tensors.len(), loaded.tensors.len());
        for (a, b) in params.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Saving the loaded copy reproduces the file byte for byte.
        let path2 = dir.path().join("base2.bin");
        save_params(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn adapter_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        let cfg = tiny();
        let lc = LoraConfig { rank: 4, alpha: 8.0, targets: vec![LoraTarget::Q, LoraTarget::O], dropout: 0.05 };
        let adapter: LoraAdapter<f32> = LoraAdapter::init(&cfg, &lc, 33).unwrap();
        save_adapter(&path, &cfg, &adapter).unwrap();
        let (cfg2, loaded) = load_adapter(&path, "train-grpo").unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(adapter.config, loaded.config);
        assert_eq!(adapter.tensors, loaded.tensors);
    }

    #[test]
    fn missing_file_names_the_producing_stage() {
        let err = load_params(Path::new("/nonexistent/base.bin"), "pretrain-base").unwrap_err();
        match err {
            Error::MissingArtifact { produced_by, .. } => assert_eq!(produced_by, "pretrain-base"),
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.bin");
        let params: Params<f32> = Params::init(&tiny(), 31).unwrap();
        save_params(&path, &params).unwrap();
        let full = std::fs::read(&path).unwrap();

        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(matches!(load_params(&path, "x"), Err(Error::MalformedArtifact { .. })));

        let mut wrong_magic = full.clone();
        wrong_magic[0] = b'X';
        std::fs::write(&path, &wrong_magic).unwrap();
        assert!(matches!(load_params(&path, "x"), Err(Error::MalformedArtifact { .. })));

        let mut wrong_version = full.clone();
        wrong_version[4] = 99;
        std::fs::write(&path, &wrong_version).unwrap();
        match load_params(&path, "x") {
            Err(Error::FormatVersion { found, expected, .. }) => {
                assert_eq!((found, expected), (99, FORMAT_VERSION));
            }
            other => panic!("expected FormatVersion, got {other:?}"),
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.bin");
        let params: Params<f32> = Params::init(&tiny(), 31).unwrap();
        save_params(&path, &params).unwrap();
        assert!(matches!(load_adapter(&path, "x"), Err(Error::MalformedArtifact { .. })));
    }
}
