//! Checkpoint files: a JSON header followed by a flat little-endian `f64`
//! payload of named tensors.
//!
//! Layout: `CUPCKPT\x01`, `u32` header length, header JSON, payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::retrieve::ByteReader;
use crate::scalar::Scalar;
use crate::tokenize::ProviderIdentity;

use super::layers::Params;
use super::model::{CupRank, RankerConfig};
use super::ranknet::{RankNet, RankNetConfig};

const MAGIC: &[u8; 8] = b"CUPCKPT\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// `cuprank` or `ranknet`.
    pub model: String,
    pub config: serde_json::Value,
    pub provider: ProviderIdentity,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
    pub tensors: Vec<TensorSpec>,
}

fn encode<T: Scalar, P: Params<T>>(header: &CheckpointHeader, params: &P) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for x in params.flatten() {
        out.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
    }
    Ok(out)
}

fn tensor_specs<T: Scalar, P: Params<T>>(params: &P) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    params.visit("", &mut |name, shape, _| {
        out.push(TensorSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
        })
    });
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_header(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if r.take(8).map_err(|_| bad("truncated"))? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = r.u32().map_err(|_| bad("truncated header"))? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len).map_err(|_| bad("truncated header"))?)
            .map_err(|e| bad(&e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = r.rest().to_vec();
    Ok((header, payload))
}

/// Checks names, shapes and payload size against `template`, then loads.
fn fill<T: Scalar, P: Params<T>>(
    template: &mut P,
    header: &CheckpointHeader,
    payload: &[u8],
) -> Result<()> {
    let expected = tensor_specs(template);
    if expected != header.tensors {
        return Err(Error::Checkpoint(
            "tensor names or shapes do not match the configuration".into(),
        ));
    }
    let n = template.num_params();
    if payload.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            n * 8
        )));
    }
    let flat: Vec<T> = payload
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    template.assign(&flat);
    if !template.all_finite() {
        return Err(Error::Checkpoint(
            "payload contains non-finite values".into(),
        ));
    }
    Ok(())
}

fn check_common(header: &CheckpointHeader, model: &str, provider: &ProviderIdentity) -> Result<()> {
    if header.model != model {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a `{}` model, expected `{model}`",
            header.model
        )));
    }
    if &header.provider != provider {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with provider {:?}, current provider is {:?}",
            header.provider, provider
        )));
    }
    Ok(())
}

pub fn save_cuprank<T: Scalar>(
    path: &Path,
    model: &CupRank<T>,
    provider: &ProviderIdentity,
    manifest_digest: Option<String>,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: "cuprank".into(),
        config: serde_json::to_value(&model.config)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        provider: provider.clone(),
        seed: model.config.seed,
        manifest_digest,
        tensors: tensor_specs(&model.params),
    };
    write(path, &encode(&header, &model.params)?)
}

/// Loads a CupRank checkpoint, refusing a different provider or (when
/// given) a different configuration.
pub fn load_cuprank<T: Scalar>(
    path: &Path,
    provider: &ProviderIdentity,
    expected: Option<&RankerConfig>,
) -> Result<(CupRank<T>, CheckpointHeader)> {
    let (header, payload) = read_header(path)?;
    check_common(&header, "cuprank", provider)?;
    let config: RankerConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {config:?} differs from expected {exp:?}"
            )));
        }
    }
    let mut model = CupRank::<T>::init(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fill(&mut model.params, &header, &payload)?;
    Ok((model, header))
}

pub fn save_ranknet<T: Scalar>(
    path: &Path,
    model: &RankNet<T>,
    provider: &ProviderIdentity,
    manifest_digest: Option<String>,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: "ranknet".into(),
        config: serde_json::to_value(&model.config)
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        provider: provider.clone(),
        seed: model.config.seed,
        manifest_digest,
        tensors: tensor_specs(&model.params),
    };
    write(path, &encode(&header, &model.params)?)
}

pub fn load_ranknet<T: Scalar>(
    path: &Path,
    provider: &ProviderIdentity,
) -> Result<(RankNet<T>, CheckpointHeader)> {
    let (header, payload) = read_header(path)?;
    check_common(&header, "ranknet", provider)?;
    let config: RankNetConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = RankNet::<T>::init(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fill(&mut model.params, &header, &payload)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::{EmbeddingProvider, StubProvider};

    fn config() -> RankerConfig {
        RankerConfig {
            embed_dim: 12,
            model_dim: 8,
            attention_heads: 2,
            ffn_dim: 16,
            proj_dim: 4,
            ..RankerConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let provider = StubProvider::new(8, 1);
        let model = CupRank::<f64>::init(config()).unwrap();
        save_cuprank(&path, &model, provider.identity(), Some("abc".into())).unwrap();
        let (back, header) =
            load_cuprank::<f64>(&path, provider.identity(), Some(&config())).unwrap();
        assert_eq!(back, model);
        assert_eq!(header.manifest_digest.as_deref(), Some("abc"));
        assert_eq!(header.tensors[0].name, "code.input.weight");
        assert_eq!(header.tensors[0].shape, [12, 8]);
    }

    #[test]
    fn refuses_other_provider_or_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let provider = StubProvider::new(8, 1);
        let model = CupRank::<f32>::init(config()).unwrap();
        save_cuprank(&path, &model, provider.identity(), None).unwrap();
        let other = StubProvider::new(8, 2);
        assert!(matches!(
            load_cuprank::<f32>(&path, other.identity(), None),
            Err(Error::Checkpoint(_))
        ));
        let different = RankerConfig {
            proj_dim: 8,
            ..config()
        };
        assert!(matches!(
            load_cuprank::<f32>(&path, provider.identity(), Some(&different)),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            load_ranknet::<f32>(&path, provider.identity()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let provider = StubProvider::new(8, 1);
        save_cuprank(
            &path,
            &CupRank::<f64>::init(config()).unwrap(),
            provider.identity(),
            None,
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_cuprank::<f64>(&path, provider.identity(), None),
            Err(Error::Checkpoint(_))
        ));
    }
}
