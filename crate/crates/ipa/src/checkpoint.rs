//! Policy checkpoint file format.
//!
//! Layout (little-endian throughout):
//!   magic "IPA1" | version u16 | meta_len u32 | meta (UTF-8 JSON)
//!   | n_arrays u32 | per array: name_len u32, name bytes,
//!     ndim u32, dims u32 * ndim, data f32 * numel
//!
//! The metadata block carries the model config, vocab, role flags, and the
//! optional variant manifest. Round-trips are bit-exact on parameter arrays
//! and metadata.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmParams, Policy, Role};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"IPA1";
const VERSION: u16 = 1;

/// Provenance for an assembled tailored policy, embedded in adapter
/// checkpoints after RL training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantManifest {
    pub variant: String,
    pub base_digest: String,
    pub training_base_digest: String,
    pub adapter_digest: String,
    /// Control token the adapter context is conditioned on at inference
    /// (Quark-trained adapters record their best-bin token here).
    pub control_token: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: LmConfig,
    vocab: Vocab,
    role: Role,
    frozen: bool,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<VariantManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recipe_digest: Option<String>,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated file while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(
    policy: &Policy,
    path: &Path,
    manifest: Option<&VariantManifest>,
    recipe_digest: Option<&str>,
) -> Result<()> {
    if !policy.params.all_finite() {
        return Err(Error::Numerical(
            "refusing to checkpoint non-finite parameters".into(),
        ));
    }
    let meta = Meta {
        config: policy.cfg.clone(),
        vocab: policy.vocab.clone(),
        role: policy.role,
        frozen: policy.frozen,
        seed: policy.seed,
        manifest: manifest.cloned(),
        recipe_digest: recipe_digest.map(str::to_string),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    let named = policy.params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Policy, Option<VariantManifest>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut vb = [0u8; 2];
    read_exact(&mut r, &mut vb, "version")?;
    let version = u16::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let meta_len = read_u32(&mut r, "meta length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_bytes, "metadata")?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;

    let n_arrays = read_u32(&mut r, "array count")? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for i in 0..n_arrays {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "array name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("array {i} name is not UTF-8")))?;
        let ndim = read_u32(&mut r, "ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        for v in &mut data {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "array data")?;
            *v = f32::from_le_bytes(b);
        }
        arrays.push((name, Tensor::from_vec(shape, data)?));
    }

    let params = assemble_params(&meta.config, arrays)?;
    let policy = Policy {
        cfg: meta.config,
        vocab: meta.vocab,
        params,
        frozen: meta.frozen,
        role: meta.role,
        seed: meta.seed,
    };
    Ok((policy, meta.manifest))
}

fn assemble_params(cfg: &LmConfig, arrays: Vec<(String, Tensor<f32>)>) -> Result<LmParams> {
    // Start from a freshly shaped parameter set and fill by name so the
    // stored order never matters.
    let mut params = LmParams::init(cfg, 0)?;
    let expected: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let mut seen = std::collections::HashSet::new();
    for (name, tensor) in arrays {
        let mut named = params.named_mut();
        let slot = named
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("unexpected array {name:?}")))?;
        if slot.1.shape() != tensor.shape() {
            return Err(Error::ConfigMismatch(format!(
                "array {name:?} has shape {:?}, config implies {:?}",
                tensor.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = tensor;
        seen.insert(name);
    }
    for name in expected {
        if !seen.contains(&name) {
            return Err(Error::Format(format!("missing array {name:?}")));
        }
    }
    Ok(params)
}

/// Guard for loading a checkpoint into a context that expects a particular
/// shape; widths must match exactly.
pub fn require_config(policy: &Policy, expected: &LmConfig) -> Result<()> {
    if &policy.cfg != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {:?} differs from expected {:?}",
            policy.cfg, expected
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_policy() -> Policy {
        let vocab = Vocab::from_alphabet("abc", 2).unwrap();
        let cfg = LmConfig {
            vocab_size: vocab.len(),
            dim: 8,
            heads: 2,
            layers: 2,
            context: 12,
            ff_mult: 4,
            tie_embeddings: false,
        };
        Policy::new(cfg, vocab, Role::Base, 42).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let policy = sample_policy();
        let manifest = VariantManifest {
            variant: "direct".into(),
            base_digest: policy.digest(),
            training_base_digest: policy.digest(),
            adapter_digest: "x".into(),
            control_token: Some(3),
        };
        save_checkpoint(&policy, &path, Some(&manifest), Some("d1")).unwrap();
        let (loaded, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(policy.param_bytes(), loaded.param_bytes());
        assert_eq!(policy.cfg, loaded.cfg);
        assert_eq!(policy.vocab, loaded.vocab);
        assert_eq!(policy.role, loaded.role);
        assert_eq!(policy.frozen, loaded.frozen);
        assert_eq!(policy.seed, loaded.seed);
        assert_eq!(m2.as_ref(), Some(&manifest));
        assert_eq!(policy.digest(), loaded.digest());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_policy(), &path, None, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_policy(), &path, None, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_policy(), &path, None, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn config_mismatch_on_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let policy = sample_policy();
        save_checkpoint(&policy, &path, None, None).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let mut wider = policy.cfg.clone();
        wider.dim = 16;
        assert!(matches!(
            require_config(&loaded, &wider),
            Err(Error::ConfigMismatch(_))
        ));
        assert!(require_config(&loaded, &policy.cfg).is_ok());
    }
}
