//! Bundle and embedding files.
//!
//! A bundle file is `TBBN`, a little-endian `u32` manifest length, the JSON
//! manifest, then every tensor as little-endian `f32` in manifest order. The
//! manifest names each tensor with its shape, offset and CRC32, so readers
//! look tensors up by name rather than by position.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::Featurizer;
use crate::nn::Params;
use crate::pretrain::{BundleConfig, ModelBundle, SegmentModel};
use crate::sequence::SegmentKind;

pub const MAGIC: &[u8; 4] = b"TBBN";
pub const FORMAT: &str = "tbbn/1";
pub const EMBEDDING_FORMAT: &str = "tbemb/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: BundleConfig,
    pub featurizer: Featurizer,
    pub segments: Vec<SegmentKind>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance, such as the resolved run configuration.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

fn le_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn bundle_to_bytes(bundle: &ModelBundle, provenance: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (seg, model) in &bundle.models {
        for (name, t) in model.tensors() {
            let bytes = le_bytes(t.iter().copied());
            tensors.push(TensorEntry {
                name: format!("{}/{name}", seg.name()),
                rows: t.nrows(),
                cols: t.ncols(),
                offset: blob.len() / 4,
                crc32: crc32fast::hash(&bytes),
            });
            blob.extend_from_slice(&bytes);
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: bundle.config.clone(),
        featurizer: bundle.featurizer.clone(),
        segments: bundle.models.keys().copied().collect(),
        tensors,
        provenance,
    };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Value("manifest exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Reads the manifest and the blob that follows it.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing TBBN magic".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize.checked_add(len).filter(|e| *e <= bytes.len());
    let Some(end) = end else {
        return Err(Error::Checksum(format!("manifest length {len} runs past the end of the file")));
    };
    let raw: serde_json::Value = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| Error::Format(format!("manifest is not JSON: {e}")))?;
    match raw.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT) => {}
        Some(other) => return Err(Error::Format(format!("version {other:?}, this reader supports {FORMAT:?}"))),
        None => return Err(Error::Format("manifest has no format field".into())),
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    Ok((manifest, &bytes[end..]))
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let (manifest, blob) = read_manifest(bytes)?;
    let index: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut bundle = ModelBundle::new(manifest.config.clone(), manifest.featurizer.clone());
    let vocab = bundle.featurizer.vocab.len();
    for &seg in &manifest.segments {
        let mut model = SegmentModel::<f32>::zeros(&bundle.config.encoder, vocab, bundle.config.positions)?;
        for (name, t) in model.tensors_mut() {
            let key = format!("{}/{name}", seg.name());
            let entry = index
                .get(key.as_str())
                .ok_or_else(|| Error::Format(format!("tensor {key} missing from manifest")))?;
            if (entry.rows, entry.cols) != t.dim() {
                return Err(Error::Format(format!(
                    "tensor {key} is {}x{}, expected {}x{}",
                    entry.rows,
                    entry.cols,
                    t.nrows(),
                    t.ncols()
                )));
            }
            let start = entry.offset * 4;
            let end = start + entry.rows * entry.cols * 4;
            let Some(bytes) = blob.get(start..end) else {
                return Err(Error::Checksum(format!("tensor {key} is truncated")));
            };
            if crc32fast::hash(bytes) != entry.crc32 {
                return Err(Error::Checksum(format!("tensor {key} fails its CRC32")));
            }
            for (dst, chunk) in t.iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        bundle.models.insert(seg, model);
    }
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path, provenance: serde_json::Value) -> Result<()> {
    write_atomic(path, &bundle_to_bytes(bundle, provenance)?)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    bundle_from_bytes(&bytes)
}

/// Manifest of an embedding dump; vectors live in a sibling `.f32` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub format: String,
    pub recipe: String,
    pub hidden: usize,
    pub dim: usize,
    pub count: usize,
    /// Item id to offset in `f32` elements.
    pub offsets: BTreeMap<String, usize>,
    pub crc32: u32,
    pub config: serde_json::Value,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f32")
}

/// Writes `<path>` (JSON manifest) and `<path>.f32` (vectors in id order).
pub fn save_embeddings(
    path: &Path,
    vectors: &BTreeMap<String, Vec<f32>>,
    recipe: &str,
    hidden: usize,
    config: serde_json::Value,
) -> Result<()> {
    let dim = vectors.values().next().map_or(0, Vec::len);
    let mut offsets = BTreeMap::new();
    let mut blob = Vec::new();
    for (id, v) in vectors {
        if v.len() != dim {
            return Err(Error::Shape(format!("embedding {id} has length {} not {dim}", v.len())));
        }
        offsets.insert(id.clone(), blob.len() / 4);
        blob.extend(le_bytes(v.iter().copied()));
    }
    let manifest = EmbeddingManifest {
        format: EMBEDDING_FORMAT.into(),
        recipe: recipe.into(),
        hidden,
        dim,
        count: vectors.len(),
        offsets,
        crc32: crc32fast::hash(&blob),
        config,
    };
    write_atomic(&blob_path(path), &blob)?;
    write_atomic(path, &serde_json::to_vec_pretty(&manifest)?)
}

pub fn load_embeddings(path: &Path) -> Result<(EmbeddingManifest, BTreeMap<String, Vec<f32>>)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: EmbeddingManifest = serde_json::from_slice(&text)?;
    if manifest.format != EMBEDDING_FORMAT {
        return Err(Error::Format(format!("version {:?}, expected {EMBEDDING_FORMAT:?}", manifest.format)));
    }
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if blob.len() != manifest.count * manifest.dim * 4 || crc32fast::hash(&blob) != manifest.crc32 {
        return Err(Error::Checksum(format!("{} does not match its manifest", bp.display())));
    }
    let mut out = BTreeMap::new();
    for (id, &off) in &manifest.offsets {
        let bytes = &blob[off * 4..(off + manifest.dim) * 4];
        out.insert(id.clone(), bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::featurize::Vocabulary;

    fn bundle() -> ModelBundle {
        let config = BundleConfig {
            encoder: EncoderConfig {
                hidden: 12,
                layers: 1,
                heads: 2,
                ..Default::default()
            },
            positions: 16,
            ..Default::default()
        };
        let vocab = Vocabulary::from_tokens(vec!["alpha".into(), "beta".into()], false);
        ModelBundle::initialized(config, Featurizer::new(vocab), 7).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let b = bundle();
        let bytes = bundle_to_bytes(&b, serde_json::Value::Null).unwrap();
        let back = bundle_from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(bundle_to_bytes(&back, serde_json::Value::Null).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = bundle_to_bytes(&bundle(), serde_json::Value::Null).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 400, 20] {
            assert!(matches!(bundle_from_bytes(&bytes[..cut]), Err(Error::Checksum(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(bundle_from_bytes(&flipped), Err(Error::Checksum(_))));
    }

    #[test]
    fn newer_format_is_named() {
        let bytes = bundle_to_bytes(&bundle(), serde_json::Value::Null).unwrap();
        let (m, blob) = read_manifest(&bytes).unwrap();
        let mut v = serde_json::to_value(&m).unwrap();
        v["format"] = "tbbn/2".into();
        let json = serde_json::to_vec(&v).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        out.extend(blob);
        match bundle_from_bytes(&out) {
            Err(Error::Format(msg)) => assert!(msg.contains("tbbn/2"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(bundle_from_bytes(b"NOPE\0\0\0\0"), Err(Error::Format(_))));
    }
}
