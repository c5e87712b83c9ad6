//! Versioned binary container for a trained head.
//!
//! Layout (all integers little-endian):
//!
//! | offset          | size         | content                               |
//! |-----------------|--------------|---------------------------------------|
//! | 0               | 8            | magic `SSEGCKPT`                      |
//! | 8               | 4            | format version (u32)                  |
//! | 12              | 8            | header length `H` in bytes (u64)      |
//! | 20              | `H`          | UTF-8 JSON header                     |
//! | 20 + `H`        | rest         | weight blob, f32 values               |
//!
//! The header holds the backbone spec and its digest, all configs, the
//! training position (epoch counter and RNG state), an optional class table,
//! a tensor table (`name`, `shape`, `offset`, `len`, with offsets and lengths
//! counted in f32 elements from the start of the blob) and the SHA-256 of the
//! blob. Tensors are stored in parameter-visit order, fusion first.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::loss::LossConfig;
use crate::mask::ClassTable;
use crate::model::SegmentationModel;
use crate::params::NamedParams;
use crate::trainer::{RngState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"SSEGCKPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub backbone: BackboneSpec,
    pub model: SegmentationModel,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub classes: Option<ClassTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub backbone: BackboneSpec,
    pub backbone_digest: String,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub epochs_done: u64,
    pub rng: RngState,
    pub classes: Option<ClassTable>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

/// Shapes in visit order: `[in, out]` weights followed by `[out]` biases.
fn tensor_shapes(model: &SegmentationModel) -> Vec<Vec<usize>> {
    let dense = model
        .fusion
        .levels
        .iter()
        .flat_map(|l| [&l.proj, &l.refine])
        .chain(&model.decoder.layers);
    dense
        .flat_map(|d| [vec![d.in_dim, d.out_dim], vec![d.out_dim]])
        .collect()
}

impl Checkpoint {
    pub fn header(&self) -> Header {
        let shapes = tensor_shapes(&self.model);
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut hasher = Sha256::new();
        let mut i = 0;
        self.model.visit(&mut |name, t| {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: shapes[i].clone(),
                offset,
                len: t.len() as u64,
            });
            offset += t.len() as u64;
            i += 1;
        });
        Header {
            backbone: self.backbone.clone(),
            backbone_digest: self.backbone.digest(),
            fusion: self.model.fusion_cfg.clone(),
            decoder: self.model.decoder_cfg.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
            epochs_done: self.state.epochs_done,
            rng: self.state.rng_state(),
            classes: self.classes.clone(),
            tensors,
            blob_sha256: hex::encode(hasher.finalize()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::Contract(e.to_string()))?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + 4 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        self.model.visit(&mut |_, t| {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        Ok(out)
    }

    /// Parses a container, checking its integrity and, if given, that it was
    /// produced for the `expected` backbone.
    pub fn from_bytes(bytes: &[u8], expected: Option<&BackboneSpec>) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < PREAMBLE {
            return Err(corrupt("file is shorter than the preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic bytes; not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let blob_start = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| corrupt("header extends past the end of the file"))? as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..blob_start])
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;

        let own_digest = header.backbone.digest();
        if header.backbone_digest != own_digest {
            return Err(Error::BackboneMismatch {
                found: header.backbone_digest,
                expected: own_digest,
            });
        }
        if let Some(spec) = expected {
            if spec.digest() != header.backbone_digest {
                return Err(Error::BackboneMismatch {
                    found: header.backbone_digest,
                    expected: spec.digest(),
                });
            }
        }

        let blob = &bytes[blob_start..];
        if !blob.len().is_multiple_of(4) {
            return Err(corrupt("weight blob is not a whole number of f32 values"));
        }
        let total: u64 = header.tensors.iter().map(|t| t.len).sum();
        if total * 4 != blob.len() as u64 {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor table lists {total} values but the blob holds {}",
                blob.len() / 4
            )));
        }
        if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
            return Err(corrupt("weight blob checksum mismatch"));
        }

        let mut model = SegmentationModel::new(&header.backbone, header.fusion.clone(), header.decoder.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("header configs are invalid: {e}")))?;
        let shapes = tensor_shapes(&model);
        if shapes.len() != header.tensors.len() {
            return Err(corrupt("tensor table does not match the configured architecture"));
        }
        let mut i = 0;
        let mut mismatch = None;
        model.visit_mut(&mut |name, t| {
            let entry = &header.tensors[i];
            if mismatch.is_none()
                && (entry.name != name || entry.shape != shapes[i] || entry.len as usize != t.len())
            {
                mismatch = Some(format!("tensor {i} is {} {:?}, expected {name} {:?}", entry.name, entry.shape, shapes[i]));
            }
            if mismatch.is_none() {
                let start = entry.offset as usize * 4;
                match blob.get(start..start + t.len() * 4) {
                    Some(raw) => {
                        for (v, b) in t.iter_mut().zip(raw.chunks_exact(4)) {
                            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                        }
                    }
                    None => mismatch = Some(format!("tensor {name} lies outside the blob")),
                }
            }
            i += 1;
        });
        if let Some(m) = mismatch {
            return Err(Error::CorruptCheckpoint(m));
        }
        if let Some(classes) = &header.classes {
            classes
                .validate()
                .map_err(|e| Error::CorruptCheckpoint(format!("class table: {e}")))?;
            if classes.len() != model.num_classes() {
                return Err(corrupt("class table size differs from the decoder output"));
            }
        }
        Ok(Self {
            backbone: header.backbone,
            model,
            loss: header.loss,
            train: header.train,
            state: TrainState::restore(header.epochs_done, &header.rng)?,
            classes: header.classes,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, expected: Option<&BackboneSpec>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

/// Replaces `path` with `bytes` so readers see either the old or the new
/// content, never a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let unique = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{}.{}-{unique}.tmp", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::file(&tmp, e))?;
    f.sync_all().map_err(|e| Error::file(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
    // persist the rename itself; not every platform can open a directory
    if let Ok(d) = fs::File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let backbone = BackboneSpec {
            hidden_dim: 12,
            ..BackboneSpec::default()
        };
        let model = SegmentationModel::new(
            &backbone,
            FusionConfig {
                proj_dim: 4,
                ..FusionConfig::default()
            },
            DecoderConfig {
                hidden_sizes: vec![8],
                ..DecoderConfig::default()
            },
        )
        .unwrap();
        Checkpoint {
            backbone,
            model,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            state: TrainState::new(5),
            classes: Some(ClassTable::default_for(2)),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = small();
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a, Some(&ck.backbone)).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn header_documents_offsets() {
        let ck = small();
        let h = ck.header();
        assert_eq!(h.tensors[0].name, "fusion.level0.proj.weight");
        assert_eq!(h.tensors[0].shape, vec![12, 4]);
        assert_eq!(h.tensors[1].offset, 48);
        let last = h.tensors.last().unwrap();
        assert_eq!((last.offset + last.len) as usize, ck.model.param_count());
    }

    #[test]
    fn rejects_other_backbone() {
        let ck = small();
        let bytes = ck.to_bytes().unwrap();
        let other = BackboneSpec {
            tap_layers: vec![4, 8, 12, 12],
            ..ck.backbone.clone()
        };
        let err = Checkpoint::from_bytes(&bytes, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::BackboneMismatch { .. }));
    }

    #[test]
    fn rejects_altered_digest() {
        let ck = small();
        let bytes = ck.to_bytes().unwrap();
        let digest = ck.backbone.digest();
        let text = String::from_utf8_lossy(&bytes[PREAMBLE..]).into_owned();
        let pos = text.find(&digest).unwrap() + PREAMBLE;
        let mut altered = bytes.clone();
        altered[pos] = if altered[pos] == b'0' { b'1' } else { b'0' };
        let err = Checkpoint::from_bytes(&altered, None).unwrap_err();
        assert!(matches!(err, Error::BackboneMismatch { .. }), "{err}");
    }

    #[test]
    fn rejects_truncation_and_version() {
        let bytes = small().to_bytes().unwrap();
        for cut in [0, 10, 30, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], None).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "{cut}: {err}");
        }
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2, None).unwrap_err(),
            Error::CheckpointVersion { found: 2, expected: 1 }
        ));
        let mut flipped = bytes;
        let n = flipped.len();
        flipped[n - 2] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, None).unwrap_err(),
            Error::CorruptCheckpoint(_)
        ));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = small();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p, Some(&ck.backbone)).unwrap();
        back.save(&dir.path().join("m2.ckpt")).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join("m2.ckpt")).unwrap());
    }
}
