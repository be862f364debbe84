//! Checkpoint container: a JSON manifest (config, seed, norm stats,
//! per-tensor name/shape/frozen/checksum) followed by raw little-endian
//! 64-bit-float tensor payloads in manifest order.
//!
//! Values are widened to `f64` on write and narrowed on read, which is exact
//! for both supported precisions, so round-trips are bit-exact. Corruption
//! is reported with the byte offset and the offending tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actions::NormStats;
use crate::error::{Error, Result};
use crate::lora::{lora_wrap, LoraSpec};
use crate::params::{checksum_tensor, ParamStore};
use crate::policy::{Policy, PolicyConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

pub const MAGIC: &[u8; 4] = b"TVLA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// "policy" or "tactile-encoder".
    pub kind: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_config: Option<PolicyConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_config: Option<ViTConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_stats: Option<NormStats>,
    pub tensors: Vec<TensorMeta>,
}

/// Write a checkpoint holding the given store entries (in store order),
/// optionally restricted to names passing `keep`.
pub fn save_store<S: Scalar>(
    path: &Path,
    mut manifest: Manifest,
    store: &ParamStore<S>,
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    let selected: Vec<_> = store.iter().filter(|(_, e)| keep(&e.name)).collect();
    manifest.format_version = FORMAT_VERSION;
    manifest.tensors = selected
        .iter()
        .map(|(_, e)| TensorMeta {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            frozen: e.frozen,
            checksum: checksum_tensor(&e.value),
        })
        .collect();

    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, e) in &selected {
        for v in e.value.data() {
            w.write_all(&v.to_le_f64_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint into a fresh store (manifest order, frozen flags and
/// checksums enforced).
pub fn load_store<S: Scalar>(path: &Path) -> Result<(Manifest, ParamStore<S>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset: u64 = 0;

    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic (not a checkpoint)".into() });
    }
    let mut version_bytes = [0u8; 4];
    read_exact_at(&mut r, &mut version_bytes, &mut offset, "version")?;
    let version = u32::from_le_bytes(version_bytes);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let mut len_bytes = [0u8; 8];
    read_exact_at(&mut r, &mut len_bytes, &mut offset, "manifest length")?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    read_exact_at(&mut r, &mut manifest_bytes, &mut offset, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut store: ParamStore<S> = ParamStore::new(manifest.seed);
    for meta in &manifest.tensors {
        let numel: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact_at(&mut r, &mut buf, &mut offset, &format!("payload of {}", meta.name))?;
            data.push(S::from_le_f64_bytes(buf));
        }
        let tensor = Tensor::new(meta.shape.clone(), data)?;
        let actual = checksum_tensor(&tensor);
        if actual != meta.checksum {
            return Err(Error::Format {
                offset,
                detail: format!("checksum mismatch for tensor {}", meta.name),
            });
        }
        let id = store.register(&meta.name, tensor)?;
        store.set_frozen(id, meta.frozen);
    }
    Ok((manifest, store))
}

fn read_exact_at<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
            offset: *offset,
            detail: format!("truncated while reading {what}"),
        }),
        Err(e) => Err(e.into()),
    }
}

/// Save a full policy (config, variant wiring, adapters, norm stats).
pub fn save_policy<S: Scalar>(
    path: &Path,
    policy: &Policy<S>,
    lora: Option<&LoraSpec>,
) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "policy".into(),
        seed: policy.seed,
        policy_config: Some(policy.config),
        encoder_config: None,
        lora: lora.cloned(),
        norm_stats: policy.norm_stats.clone(),
        tensors: Vec::new(),
    };
    save_store(path, manifest, &policy.store, |_| true)
}

/// Rebuild a policy from a checkpoint: construct from the stored config and
/// seed, re-apply the LoRA wrap when present, then overwrite every tensor.
pub fn load_policy<S: Scalar>(path: &Path) -> Result<Policy<S>> {
    let (manifest, loaded) = load_store::<S>(path)?;
    if manifest.kind != "policy" {
        return Err(Error::Format {
            offset: 0,
            detail: format!("checkpoint kind '{}', expected 'policy'", manifest.kind),
        });
    }
    let config = manifest
        .policy_config
        .ok_or_else(|| Error::Format { offset: 0, detail: "missing policy config".into() })?;
    let mut policy: Policy<S> = Policy::build(config, manifest.seed)?;
    if let Some(spec) = &manifest.lora {
        lora_wrap(&mut policy, spec)?;
    }

    // The rebuilt store must describe exactly the same tensors.
    if policy.store.len() != loaded.len() {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "checkpoint has {} tensors, rebuilt policy expects {}",
                loaded.len(),
                policy.store.len()
            ),
        });
    }
    for (_, e) in loaded.iter() {
        let id = policy.store.id(&e.name).ok_or_else(|| Error::Format {
            offset: 0,
            detail: format!("unexpected tensor {}", e.name),
        })?;
        let dst = policy.store.entry_mut(id);
        if dst.value.shape() != e.value.shape() {
            return Err(Error::Format {
                offset: 0,
                detail: format!("shape mismatch for tensor {}", e.name),
            });
        }
        dst.value = e.value.clone();
        dst.frozen = e.frozen;
    }
    policy.norm_stats = manifest.norm_stats.clone();
    Ok(policy)
}

/// Save only the tactile-encoder subtree of a store (names under `tac.`).
pub fn save_encoder<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    config: ViTConfig,
    seed: u64,
) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: "tactile-encoder".into(),
        seed,
        policy_config: None,
        encoder_config: Some(config),
        lora: None,
        norm_stats: None,
        tensors: Vec::new(),
    };
    save_store(path, manifest, store, |name| name.starts_with("tac."))
}

/// Load a tactile-encoder checkpoint (returns its config and a store holding
/// the frozen `tac.*` tensors).
pub fn load_encoder<S: Scalar>(path: &Path) -> Result<(ViTConfig, ParamStore<S>)> {
    let (manifest, store) = load_store::<S>(path)?;
    if manifest.kind != "tactile-encoder" {
        return Err(Error::Format {
            offset: 0,
            detail: format!("checkpoint kind '{}', expected 'tactile-encoder'", manifest.kind),
        });
    }
    let config = manifest
        .encoder_config
        .ok_or_else(|| Error::Format { offset: 0, detail: "missing encoder config".into() })?;
    Ok((config, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Variant;

    fn small_policy(variant: Variant, seed: u64) -> Policy<f64> {
        let config = PolicyConfig {
            variant,
            vision: ViTConfig {
                image_size: 16,
                patch_size: 8,
                channels: 3,
                embed_dim: 16,
                blocks: 3,
                heads: 2,
                mlp_ratio: 2,
            },
            tactile: ViTConfig {
                image_size: 16,
                patch_size: 8,
                channels: 6,
                embed_dim: 8,
                blocks: 3,
                heads: 2,
                mlp_ratio: 2,
            },
            d_lm: 24,
            lm_blocks: 2,
            lm_heads: 2,
            max_seq: 48,
            ..Default::default()
        };
        Policy::build(config, seed).unwrap()
    }

    #[test]
    fn policy_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut p = small_policy(Variant::TactileFilm, 123);
        p.norm_stats = Some(NormStats::new(vec![-1.0, -2.0, -0.1], vec![1.0, 2.0, 0.1]).unwrap());
        save_policy(&path, &p, None).unwrap();
        let q: Policy<f64> = load_policy(&path).unwrap();
        assert_eq!(p.store.len(), q.store.len());
        for (_, e) in p.store.iter() {
            let qid = q.store.id(&e.name).unwrap();
            assert_eq!(e.value.data(), q.store.value(qid).data(), "{} differs", e.name);
        }
        assert_eq!(p.norm_stats, q.norm_stats);

        // Saving the reloaded policy reproduces the file byte-for-byte.
        let path2 = dir.path().join("p2.ckpt");
        save_policy(&path2, &q, None).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrapped_policy_roundtrip_restores_adapters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut p = small_policy(Variant::VisionOnly, 5);
        let spec = LoraSpec::default();
        crate::lora::lora_wrap(&mut p, &spec).unwrap();
        save_policy(&path, &p, Some(&spec)).unwrap();
        let q: Policy<f64> = load_policy(&path).unwrap();
        assert!(q.lora_wrapped);
        assert!(q.store.id("lm.blocks.0.attn.h0.q.lora.a").is_some());
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let p = small_policy(Variant::VisionOnly, 9);
        save_policy(&path, &p, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_policy::<f64>(&path) {
            Err(Error::Format { offset, detail }) => {
                assert!(offset > 0);
                assert!(detail.contains("truncated"), "{detail}");
            }
            Err(e) => panic!("expected format error, got {e}"),
            Ok(_) => panic!("expected format error, got a policy"),
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum_with_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let p = small_policy(Variant::VisionOnly, 9);
        save_policy(&path, &p, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 4] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_policy::<f64>(&path) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("checksum mismatch for tensor"), "{detail}");
            }
            Err(e) => panic!("expected format error, got {e}"),
            Ok(_) => panic!("expected format error, got a policy"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        match load_policy::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            Err(e) => panic!("expected format error, got {e}"),
            Ok(_) => panic!("expected format error, got a policy"),
        }
    }

    #[test]
    fn encoder_subtree_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let p = small_policy(Variant::TactileFilm, 33);
        save_encoder(&path, &p.store, p.config.tactile, 33).unwrap();
        let (cfg, store) = load_encoder::<f64>(&path).unwrap();
        assert_eq!(cfg, p.config.tactile);
        assert!(store.len() > 0);
        for (_, e) in store.iter() {
            assert!(e.name.starts_with("tac."));
            assert!(e.frozen, "encoder tensors must carry the frozen flag");
        }
    }
}
