//! On-disk session store.
//!
//! ```text
//! <root>/sessions/<id>/
//!     meta.json              commit point, replaced atomically
//!     image.<ext>            uploaded image bytes, never modified
//!     scribbles/<v>.png      one file per accepted scribble upload
//!     rev/<n>/checkpoint.ssegckpt
//!     rev/<n>/mask.png       (n >= 1)
//!     rev/<n>/probabilities.tiff
//!     pca/<layer>.png        cache
//! ```
//!
//! Files under `rev/<n>` and `scribbles/` are written before `meta.json`
//! names them and are never rewritten afterwards. A session directory
//! without `meta.json` or a revision directory above the committed one is
//! the leftover of an interrupted write and is removed on startup.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scribseg::checkpoint::write_atomic;
use scribseg::mask::ClassTable;

pub const META: &str = "meta.json";
pub const CHECKPOINT: &str = "checkpoint.ssegckpt";
pub const MASK: &str = "mask.png";
pub const PROBABILITIES: &str = "probabilities.tiff";

/// What one committed training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionInfo {
    pub revision: u64,
    pub epochs_done: u64,
    pub scribble_version: u64,
    pub final_loss: Option<f64>,
    pub checkpoint_sha256: String,
    pub mask_sha256: Option<String>,
}

/// Persistent part of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub image_file: String,
    pub width: usize,
    pub height: usize,
    pub spacing_um: f64,
    pub classes: ClassTable,
    pub seed: u64,
    /// Last committed revision; 0 until the first training run.
    pub revision: u64,
    /// Last accepted scribble upload; 0 when none.
    pub scribble_version: u64,
    pub revisions: Vec<RevisionInfo>,
}

pub fn sessions_root(root: &Path) -> PathBuf {
    root.join("sessions")
}

#[derive(Debug, Clone)]
pub struct SessionDir(pub PathBuf);

impl SessionDir {
    pub fn meta(&self) -> PathBuf {
        self.0.join(META)
    }

    pub fn image(&self, meta: &SessionMeta) -> PathBuf {
        self.0.join(&meta.image_file)
    }

    pub fn scribbles(&self, version: u64) -> PathBuf {
        self.0.join("scribbles").join(format!("{version}.png"))
    }

    pub fn revision(&self, n: u64) -> PathBuf {
        self.0.join("rev").join(n.to_string())
    }

    pub fn checkpoint(&self, n: u64) -> PathBuf {
        self.revision(n).join(CHECKPOINT)
    }

    pub fn mask(&self, n: u64) -> PathBuf {
        self.revision(n).join(MASK)
    }

    pub fn probabilities(&self, n: u64) -> PathBuf {
        self.revision(n).join(PROBABILITIES)
    }

    pub fn pca(&self, layer: usize, upsample: bool) -> PathBuf {
        let suffix = if upsample { "_full" } else { "" };
        self.0.join("pca").join(format!("{layer}{suffix}.png"))
    }

    pub fn commit(&self, meta: &SessionMeta) -> scribseg::Result<()> {
        let text = serde_json::to_vec_pretty(meta).expect("meta serializes");
        write_atomic(&self.meta(), &text)
    }

    pub fn load_meta(&self) -> scribseg::Result<SessionMeta> {
        let path = self.meta();
        let bytes = fs::read(&path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| scribseg::Error::Input(format!("{}: {e}", path.display())))
    }

    /// Removes revisions and scribble files newer than `meta` commits to,
    /// plus temporary files from interrupted writes.
    pub fn sweep(&self, meta: &SessionMeta) -> std::io::Result<()> {
        if let Ok(entries) = fs::read_dir(self.0.join("rev")) {
            for e in entries.flatten() {
                let keep = e
                    .file_name()
                    .to_str()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|n| n <= meta.revision);
                if !keep {
                    fs::remove_dir_all(e.path())?;
                }
            }
        }
        if let Ok(entries) = fs::read_dir(self.0.join("scribbles")) {
            for e in entries.flatten() {
                let keep = e
                    .file_name()
                    .to_str()
                    .and_then(|s| s.strip_suffix(".png"))
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|v| v <= meta.scribble_version);
                if !keep {
                    fs::remove_file(e.path())?;
                }
            }
        }
        for e in fs::read_dir(&self.0)?.flatten() {
            if e.file_name().to_string_lossy().ends_with(".tmp") {
                fs::remove_file(e.path())?;
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Creates `dir` and its parents.
pub fn ensure_dir(dir: &Path) -> scribseg::Result<()> {
    fs::create_dir_all(dir).map_err(scribseg::Error::Io)
}
