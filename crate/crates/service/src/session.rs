//! Sessions, their lifecycle and the training job.
//!
//! Each session has one mutex guarding its metadata and status. Training
//! snapshots what it needs under the lock, runs without it, and takes it
//! again only to commit. Readers resolve a revision number under the lock and
//! then read that revision's immutable files, so a mask and a checkpoint
//! fetched for the same revision always belong together.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use scribseg::backbone::{Backbone, ProviderRegistry};
use scribseg::checkpoint::{write_atomic, Checkpoint};
use scribseg::config::WorkbenchConfig;
use scribseg::decoder::{argmax_mask, DecoderConfig};
use scribseg::export::encode_probability_tiff;
use scribseg::featviz::pca_rgb_image;
use scribseg::fusion::FusionConfig;
use scribseg::image::ImagePlane;
use scribseg::mask::{ClassTable, LabelMask, IGNORE};
use scribseg::model::SegmentationModel;
use scribseg::tiler::segment;
use scribseg::trainer::{scribble_examples, train, ScribbleMask, TrainState};

use crate::error::ApiError;
use crate::store::{ensure_dir, sessions_root, sha256_hex, RevisionInfo, SessionDir, SessionMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Idle,
    Training,
    Inferring,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Idle => "idle",
            Status::Training => "training",
            Status::Inferring => "inferring",
        }
    }
}

/// Progress stream entries, serialized with a `type` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Status { revision: u64, status: Status },
    Epoch { revision: u64, epoch: u64, epochs: u64, loss: f64 },
    Committed { revision: u64 },
    Failed { revision: u64, cause: String },
}

struct State {
    meta: SessionMeta,
    status: Status,
}

pub struct Session {
    dir: SessionDir,
    image: Arc<ImagePlane>,
    state: Mutex<State>,
    events: broadcast::Sender<Event>,
}

/// Public view of a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub revision: u64,
    pub status: Status,
    pub width: usize,
    pub height: usize,
    pub spacing_um: f64,
    pub classes: ClassTable,
    pub scribble_version: u64,
    pub revisions: Vec<RevisionInfo>,
}

/// How the image of a new session is supplied.
pub enum ImageSource {
    Bytes { bytes: Vec<u8>, extension: String },
    Path(PathBuf),
}

/// An immutable file tied to a committed revision.
pub struct RevisionFile {
    pub revision: u64,
    pub status: Status,
    pub bytes: Vec<u8>,
}

impl Session {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn snapshot(&self) -> (u64, Status) {
        let s = self.lock();
        (s.meta.revision, s.status)
    }

    pub fn info(&self) -> SessionInfo {
        let s = self.lock();
        SessionInfo {
            id: s.meta.id.clone(),
            revision: s.meta.revision,
            status: s.status,
            width: s.meta.width,
            height: s.meta.height,
            spacing_um: s.meta.spacing_um,
            classes: s.meta.classes.clone(),
            scribble_version: s.meta.scribble_version,
            revisions: s.meta.revisions.clone(),
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    fn emit(&self, e: Event) {
        // no subscribers is fine
        let _ = self.events.send(e);
    }

    fn tag(&self, e: ApiError) -> ApiError {
        let (r, s) = self.snapshot();
        e.with_session(r, s)
    }

    /// Resolves `requested` against the committed revision.
    fn resolve(&self, requested: Option<u64>) -> Result<(u64, Status), ApiError> {
        let (current, status) = self.snapshot();
        match requested {
            None => Ok((current, status)),
            Some(n) if n <= current => Ok((n, status)),
            Some(n) => Err(ApiError::not_found(format!("revision {n} is not committed; latest is {current}"))
                .with_session(current, status)),
        }
    }

    fn read_revision_file(&self, revision: u64, status: Status, path: &Path) -> Result<RevisionFile, ApiError> {
        let bytes = fs::read(path)
            .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())).with_session(revision, status))?;
        Ok(RevisionFile { revision, status, bytes })
    }

    /// Mask PNG for a revision; `None` bytes mean revision 0 (untrained).
    pub fn mask(&self, requested: Option<u64>) -> Result<(RevisionFile, bool), ApiError> {
        let (revision, status) = self.resolve(requested)?;
        if revision == 0 {
            let (classes, w, h) = {
                let s = self.lock();
                (s.meta.classes.clone(), s.meta.width, s.meta.height)
            };
            let bytes = LabelMask::filled(w, h, IGNORE)
                .encode_indexed_png(&classes)
                .map_err(|e| self.tag(e.into()))?;
            return Ok((RevisionFile { revision, status, bytes }, true));
        }
        Ok((self.read_revision_file(revision, status, &self.dir.mask(revision))?, false))
    }

    pub fn probabilities(&self, requested: Option<u64>) -> Result<RevisionFile, ApiError> {
        let (revision, status) = self.resolve(requested)?;
        if revision == 0 {
            return Err(ApiError::not_found("no trained model yet").with_session(revision, status));
        }
        self.read_revision_file(revision, status, &self.dir.probabilities(revision))
    }

    pub fn checkpoint(&self, requested: Option<u64>) -> Result<RevisionFile, ApiError> {
        let (revision, status) = self.resolve(requested)?;
        self.read_revision_file(revision, status, &self.dir.checkpoint(revision))
    }

    /// Current scribbles as a grayscale PNG of raw labels.
    pub fn scribbles_png(&self) -> Result<RevisionFile, ApiError> {
        let (revision, status, version, w, h) = {
            let s = self.lock();
            (s.meta.revision, s.status, s.meta.scribble_version, s.meta.width, s.meta.height)
        };
        if version == 0 {
            let bytes = LabelMask::filled(w, h, IGNORE).encode_gray_png().map_err(|e| self.tag(e.into()))?;
            return Ok(RevisionFile { revision, status, bytes });
        }
        self.read_revision_file(revision, status, &self.dir.scribbles(version))
    }

    /// Validates and stores a full scribble raster; returns the new
    /// scribble version.
    pub fn put_scribbles(&self, labels: LabelMask) -> Result<u64, ApiError> {
        let mut s = self.lock();
        let tag = |e: ApiError, s: &State| e.with_session(s.meta.revision, s.status);
        let scribbles = ScribbleMask::new(labels, s.meta.spacing_um);
        if let Err(e) = scribbles.validate(&self.image, s.meta.classes.len()) {
            return Err(tag(ApiError::bad_request(e.to_string()), &s));
        }
        let version = s.meta.scribble_version + 1;
        let path = self.dir.scribbles(version);
        let write = || -> scribseg::Result<()> {
            ensure_dir(path.parent().expect("scribbles dir"))?;
            write_atomic(&path, &scribbles.labels.encode_gray_png()?)
        };
        write().map_err(|e| tag(e.into(), &s))?;
        let mut meta = s.meta.clone();
        meta.scribble_version = version;
        self.dir.commit(&meta).map_err(|e| tag(e.into(), &s))?;
        s.meta = meta;
        Ok(version)
    }

    fn load_scribbles(&self, version: u64) -> scribseg::Result<LabelMask> {
        LabelMask::load_png(&self.dir.scribbles(version))
    }
}

/// Shared state behind the HTTP handlers.
pub struct Service {
    root: PathBuf,
    config: WorkbenchConfig,
    backbone: Arc<Backbone>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

/// Snapshot handed to a training job.
pub struct TrainJob {
    session: Arc<Session>,
    base_revision: u64,
    scribble_version: u64,
    epochs: usize,
}

impl Service {
    /// Opens (or creates) the store under `root` and resumes every session
    /// at its last committed revision.
    pub fn open(root: &Path, config: WorkbenchConfig) -> scribseg::Result<Self> {
        config.validate()?;
        let backbone = ProviderRegistry::default().build(&config.backbone.spec, config.backbone.weights.as_deref())?;
        let sessions_dir = sessions_root(root);
        ensure_dir(&sessions_dir)?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&sessions_dir)?.flatten() {
            let dir = SessionDir(entry.path());
            if !entry.path().is_dir() {
                continue;
            }
            if !dir.meta().exists() {
                tracing::warn!(path = %entry.path().display(), "removing uncommitted session");
                fs::remove_dir_all(entry.path())?;
                continue;
            }
            let meta = dir.load_meta()?;
            dir.sweep(&meta)?;
            let image = ImagePlane::load(&dir.image(&meta))?.with_spacing(meta.spacing_um);
            tracing::info!(id = %meta.id, revision = meta.revision, "resumed session");
            sessions.insert(meta.id.clone(), Arc::new(Self::session(dir, image, meta)));
        }
        Ok(Self {
            root: root.to_path_buf(),
            config,
            backbone: Arc::new(backbone),
            sessions: RwLock::new(sessions),
        })
    }

    fn session(dir: SessionDir, image: ImagePlane, meta: SessionMeta) -> Session {
        let (events, _) = broadcast::channel(256);
        Session {
            dir,
            image: Arc::new(image),
            state: Mutex::new(State { meta, status: Status::Idle }),
            events,
        }
    }

    pub fn config(&self) -> &WorkbenchConfig {
        &self.config
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id:?}")))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Decodes the image, initializes a seeded model as revision 0 and
    /// commits the session.
    pub fn create(&self, source: ImageSource, spacing_um: Option<f64>, classes: ClassTable, seed: Option<u64>) -> Result<Arc<Session>, ApiError> {
        classes.validate()?;
        let (bytes, extension) = match source {
            ImageSource::Bytes { bytes, extension } => (bytes, extension),
            ImageSource::Path(p) => {
                let bytes = fs::read(&p).map_err(|e| ApiError::bad_request(format!("{}: {e}", p.display())))?;
                let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("img").to_ascii_lowercase();
                (bytes, ext)
            }
        };
        let spacing_um = spacing_um.unwrap_or(self.config.spacing_um);
        if !(spacing_um > 0.0 && spacing_um.is_finite()) {
            return Err(ApiError::bad_request(format!("spacing_um must be positive, got {spacing_um}")));
        }
        let image = ImagePlane::decode(&bytes)
            .map_err(|e| ApiError::bad_request(format!("cannot decode image: {e}")))?
            .with_spacing(spacing_um);
        let seed = seed.unwrap_or(self.config.train.seed);
        let model = SegmentationModel::new(
            self.backbone.spec(),
            FusionConfig { init_seed: seed, ..self.config.fusion.clone() },
            DecoderConfig { num_classes: classes.len(), ..self.config.decoder.clone() },
        )?;
        model.check_lightweight()?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = SessionDir(sessions_root(&self.root).join(&id));
        let image_file = format!("image.{extension}");
        let meta = SessionMeta {
            id: id.clone(),
            image_file: image_file.clone(),
            width: image.width(),
            height: image.height(),
            spacing_um,
            classes: classes.clone(),
            seed,
            revision: 0,
            scribble_version: 0,
            revisions: Vec::new(),
        };
        let ckpt = Checkpoint {
            backbone: self.backbone.spec().clone(),
            model,
            loss: self.config.loss.clone(),
            train: scribseg::trainer::TrainConfig { seed, ..self.config.train.clone() },
            state: TrainState::new(seed),
            classes: Some(classes),
        };
        let write = || -> scribseg::Result<String> {
            ensure_dir(&dir.revision(0))?;
            write_atomic(&dir.0.join(&image_file), &bytes)?;
            let ckpt_bytes = ckpt.to_bytes()?;
            write_atomic(&dir.checkpoint(0), &ckpt_bytes)?;
            Ok(sha256_hex(&ckpt_bytes))
        };
        let sha = match write() {
            Ok(sha) => sha,
            Err(e) => {
                let _ = fs::remove_dir_all(&dir.0);
                return Err(e.into());
            }
        };
        let meta = SessionMeta {
            revisions: vec![RevisionInfo {
                revision: 0,
                epochs_done: 0,
                scribble_version: 0,
                final_loss: None,
                checkpoint_sha256: sha,
                mask_sha256: None,
            }],
            ..meta
        };
        dir.commit(&meta)?;
        let session = Arc::new(Self::session(dir, image, meta));
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id, session.clone());
        Ok(session)
    }

    /// Marks the session busy and snapshots what training needs. Fails with
    /// `busy` when a job is in flight and with `supervision` when the
    /// scribbles cannot train a model.
    pub fn begin_training(&self, session: &Arc<Session>, epochs: Option<usize>) -> Result<TrainJob, ApiError> {
        let mut s = session.lock();
        let tag = |e: ApiError, s: &State| e.with_session(s.meta.revision, s.status);
        if s.status != Status::Idle {
            return Err(tag(ApiError::busy(format!("session is {}", s.status.as_str())), &s));
        }
        let version = s.meta.scribble_version;
        let check = if version == 0 {
            Err(scribseg::Error::Supervision("no scribbles uploaded yet".into()))
        } else {
            session
                .load_scribbles(version)
                .and_then(|l| ScribbleMask::new(l, s.meta.spacing_um).check_trainable(s.meta.classes.len()))
        };
        if let Err(e) = check {
            return Err(tag(e.into(), &s));
        }
        let epochs = epochs.unwrap_or(self.config.train.epochs_interactive);
        s.status = Status::Training;
        let job = TrainJob {
            session: session.clone(),
            base_revision: s.meta.revision,
            scribble_version: version,
            epochs,
        };
        session.emit(Event::Status { revision: s.meta.revision, status: Status::Training });
        Ok(job)
    }

    /// Runs a job to completion on the calling thread: fine-tune from the
    /// base revision, segment, write the new revision, then commit.
    pub fn run_training(&self, job: TrainJob) {
        let session = job.session.clone();
        let target = job.base_revision + 1;
        let result = self.train_and_write(&job);
        let mut s = session.lock();
        match result {
            Ok(info) => {
                let mut meta = s.meta.clone();
                meta.revision = target;
                meta.revisions.push(info);
                match session.dir.commit(&meta) {
                    Ok(()) => {
                        s.meta = meta;
                        s.status = Status::Idle;
                        session.emit(Event::Committed { revision: target });
                        tracing::info!(id = %s.meta.id, revision = target, "committed");
                    }
                    Err(e) => {
                        s.status = Status::Idle;
                        let _ = fs::remove_dir_all(session.dir.revision(target));
                        session.emit(Event::Failed { revision: s.meta.revision, cause: e.to_string() });
                    }
                }
            }
            Err(e) => {
                s.status = Status::Idle;
                let _ = fs::remove_dir_all(session.dir.revision(target));
                tracing::warn!(id = %s.meta.id, error = %e, "training failed");
                session.emit(Event::Failed { revision: s.meta.revision, cause: e.to_string() });
            }
        }
        session.emit(Event::Status { revision: s.meta.revision, status: s.status });
    }

    fn train_and_write(&self, job: &TrainJob) -> scribseg::Result<RevisionInfo> {
        let session = &job.session;
        let dir = &session.dir;
        let spec = self.backbone.spec();
        let base = Checkpoint::load(&dir.checkpoint(job.base_revision), Some(spec))?;
        let scribbles = session.load_scribbles(job.scribble_version)?;
        let Checkpoint { mut model, mut state, loss, train: train_cfg, classes, .. } = base;
        let examples = scribble_examples(&self.backbone, &session.image, &scribbles, train_cfg.roi_size)?;
        let target = job.base_revision + 1;
        let epochs = job.epochs as u64;
        let first_epoch = state.epochs_done;
        let trace = train(&mut model, &examples, &train_cfg, &loss, job.epochs, &mut state, |e| {
            session.emit(Event::Epoch {
                revision: target,
                epoch: e.epoch - first_epoch,
                epochs,
                loss: e.loss,
            });
        })?;
        {
            let mut s = session.lock();
            s.status = Status::Inferring;
            session.emit(Event::Status { revision: s.meta.revision, status: Status::Inferring });
        }
        let prob = segment(&session.image, &self.backbone, &model, &self.config.tile)?;
        let classes = classes.unwrap_or_else(|| ClassTable::default_for(model.num_classes()));
        let mask_png = argmax_mask(&prob).encode_indexed_png(&classes)?;
        let ckpt = Checkpoint {
            backbone: spec.clone(),
            model,
            loss,
            train: train_cfg,
            state,
            classes: Some(classes),
        };
        let ckpt_bytes = ckpt.to_bytes()?;
        let rev = dir.revision(target);
        if rev.exists() {
            fs::remove_dir_all(&rev)?;
        }
        ensure_dir(&rev)?;
        write_atomic(&dir.checkpoint(target), &ckpt_bytes)?;
        write_atomic(&dir.probabilities(target), &encode_probability_tiff(&prob)?)?;
        write_atomic(&dir.mask(target), &mask_png)?;
        Ok(RevisionInfo {
            revision: target,
            epochs_done: ckpt.state.epochs_done,
            scribble_version: job.scribble_version,
            final_loss: trace.last().map(|e| e.loss),
            checkpoint_sha256: sha256_hex(&ckpt_bytes),
            mask_sha256: Some(sha256_hex(&mask_png)),
        })
    }

    /// PCA map of a tap layer of the session image, cached on disk.
    pub fn pca_png(&self, session: &Session, layer: usize, upsample: bool) -> Result<(Vec<u8>, bool), ApiError> {
        if !self.backbone.spec().tap_layers.contains(&layer) {
            return Err(session.tag(ApiError::bad_request(format!(
                "layer {layer} is not a tap layer; available: {:?}",
                self.backbone.spec().tap_layers
            ))));
        }
        let path = session.dir.pca(layer, upsample);
        if let Ok(bytes) = fs::read(&path) {
            return Ok((bytes, false));
        }
        let run = || -> scribseg::Result<(Vec<u8>, bool)> {
            let (rgb, degenerate) = pca_rgb_image(&self.backbone, &session.image, layer, upsample)?;
            let bytes = rgb.encode_png()?;
            if !degenerate {
                ensure_dir(path.parent().expect("pca dir"))?;
                write_atomic(&path, &bytes)?;
            }
            Ok((bytes, degenerate))
        };
        run().map_err(|e| session.tag(e.into()))
    }
}
