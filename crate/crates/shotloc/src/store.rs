//! File-backed data model: one JSON document per collection.
//!
//! Layout under the data directory:
//!
//! ```text
//! <root>/collections/<id>/collection.json
//! <root>/collections/<id>/artifacts/...      grid dumps, GeoJSON
//! ```
//!
//! Every write goes to a temporary file in the same directory, is synced,
//! and is renamed over the target, so readers and crashed writers never see a
//! partial document. Stale temporaries are swept on [`Store::open`].

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{Read, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use shotloc_core::geo::{GeoPoint, LocalFrame};
use shotloc_core::sync::{GlobalTimeline, PairwiseOffset, SyncMethod};
use zip::write::SimpleFileOptions;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const DOC_NAME: &str = "collection.json";
const TMP_MARK: &str = ".tmp-";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collection {
    pub id: String,
    pub title: String,
    /// Unix seconds.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub collection_id: String,
    pub title: String,
    /// Seconds.
    pub duration: f64,
    /// Frames per second.
    pub fps: f64,
    /// Path of the extracted WAV track.
    #[serde(default)]
    pub audio_path: Option<String>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFix {
    pub video_id: String,
    pub position: GeoPoint,
    /// Local video time at which the position holds, seconds.
    #[serde(default)]
    pub valid_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmedBy {
    #[default]
    Human,
    Assist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marking {
    pub video_id: String,
    /// 1-based.
    pub gunshot_index: u32,
    /// Local video time, seconds.
    #[serde(default)]
    pub shock_time: Option<f64>,
    /// Local video time, seconds.
    pub muzzle_time: f64,
    #[serde(default)]
    pub confirmed_by: ConfirmedBy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    M1,
    M2,
    Fused,
}

impl EstimateMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimateMethod::M1 => "m1",
            EstimateMethod::M2 => "m2",
            EstimateMethod::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub id: String,
    pub gunshot_index: u32,
    pub method: EstimateMethod,
    /// Everything needed to recompute the outputs, including seeds.
    pub inputs: Value,
    pub outputs: Value,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionDoc {
    pub schema_version: u32,
    /// Incremented on every write.
    pub version: u64,
    pub collection: Collection,
    /// Local map frame; set from the first camera fix.
    #[serde(default)]
    pub frame_origin: Option<GeoPoint>,
    #[serde(default)]
    pub videos: Vec<VideoRecord>,
    #[serde(default)]
    pub camera_fixes: Vec<CameraFix>,
    #[serde(default)]
    pub markings: Vec<Marking>,
    #[serde(default)]
    pub offsets: Vec<PairwiseOffset>,
    #[serde(default)]
    pub timeline: Option<GlobalTimeline>,
    #[serde(default)]
    pub estimates: Vec<EstimateRecord>,
    #[serde(default)]
    pub next_video: u64,
    #[serde(default)]
    pub next_estimate: u64,
}

impl CollectionDoc {
    pub fn id(&self) -> &str {
        &self.collection.id
    }

    pub fn video(&self, id: &str) -> Result<&VideoRecord> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::NotFound(format!("video {id}")))
    }

    pub fn fix(&self, video: &str) -> Option<&CameraFix> {
        self.camera_fixes.iter().find(|f| f.video_id == video)
    }

    pub fn marking(&self, video: &str, gunshot: u32) -> Option<&Marking> {
        self.markings
            .iter()
            .find(|m| m.video_id == video && m.gunshot_index == gunshot)
    }

    pub fn frame(&self) -> Result<LocalFrame> {
        let origin = self
            .frame_origin
            .ok_or_else(|| Error::validation("collection has no camera fixes"))?;
        Ok(LocalFrame::new(origin)?)
    }

    pub fn estimate(&self, id: &str) -> Result<&EstimateRecord> {
        self.estimates
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::NotFound(format!("estimate {id}")))
    }

    /// Latest record of a method for a gunshot.
    pub fn latest(&self, method: EstimateMethod, gunshot: u32) -> Option<&EstimateRecord> {
        self.estimates
            .iter()
            .rev()
            .find(|e| e.method == method && e.gunshot_index == gunshot)
    }

    /// Fingerprint of everything estimates and sync depend on, excluding
    /// derived state (estimates, audio offsets, the timeline, the version).
    pub fn input_fingerprint(&self) -> Value {
        let manual: Vec<_> = self
            .offsets
            .iter()
            .filter(|o| o.method == SyncMethod::Manual)
            .collect();
        serde_json::json!({
            "frame_origin": self.frame_origin,
            "videos": self.videos,
            "camera_fixes": self.camera_fixes,
            "markings": self.markings,
            "manual_offsets": manual,
        })
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewVideo {
    pub title: String,
    pub duration: f64,
    pub fps: f64,
    #[serde(default)]
    pub audio_path: Option<String>,
    #[serde(default)]
    pub notes: String,
}

pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    create_lock: Mutex<()>,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Replaces `path` with `bytes` via a synced temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Io("path has no parent".into()))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io("path has no file name".into()))?
        .to_string_lossy();
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!("{name}{TMP_MARK}{}-{n}", std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, path)?;
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn check_finite_positive(x: f64, what: &str) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("{what} must be finite and > 0")))
    }
}

pub fn validate_marking(m: &Marking, video: &VideoRecord) -> Result<()> {
    if m.gunshot_index == 0 {
        return Err(Error::validation("gunshot_index is 1-based"));
    }
    let within = |t: f64| t.is_finite() && (0.0..=video.duration).contains(&t);
    if !within(m.muzzle_time) {
        return Err(Error::validation(format!(
            "muzzle_time {} s outside the video",
            m.muzzle_time
        )));
    }
    if let Some(s) = m.shock_time {
        if !within(s) {
            return Err(Error::validation(format!(
                "shock_time {s} s outside the video"
            )));
        }
        if s >= m.muzzle_time {
            return Err(Error::validation("shock_time must precede muzzle_time"));
        }
    }
    Ok(())
}

impl Store {
    /// Opens or creates a store, removing temporaries left by killed writers.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("collections"))?;
        let store = Store {
            root,
            locks: Mutex::new(HashMap::new()),
            create_lock: Mutex::new(()),
        };
        store.sweep_temporaries()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn sweep_temporaries(&self) -> Result<()> {
        for dir in self.collection_dirs()? {
            for sub in [dir.clone(), dir.join("artifacts")] {
                let Ok(entries) = fs::read_dir(&sub) else {
                    continue;
                };
                for e in entries.flatten() {
                    if e.file_name().to_string_lossy().contains(TMP_MARK) {
                        fs::remove_file(e.path())?;
                    }
                }
            }
        }
        Ok(())
    }

    fn collection_dirs(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for e in fs::read_dir(self.root.join("collections"))? {
            let e = e?;
            if e.file_type()?.is_dir() {
                out.push(e.path());
            }
        }
        out.sort();
        Ok(out)
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join("collections").join(id)
    }

    pub fn artifact_path(&self, id: &str, name: &str) -> PathBuf {
        self.dir(id).join("artifacts").join(name)
    }

    pub fn write_artifact(&self, id: &str, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.artifact_path(id, name);
        fs::create_dir_all(path.parent().expect("artifact dir"))?;
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    fn valid_id(id: &str) -> Result<()> {
        let ok = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(())
        } else {
            Err(Error::NotFound(format!("collection {id}")))
        }
    }

    pub fn load(&self, id: &str) -> Result<CollectionDoc> {
        Self::valid_id(id)?;
        let path = self.dir(id).join(DOC_NAME);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("collection {id}")))
            }
            Err(e) => return Err(e.into()),
        };
        let doc: CollectionDoc = serde_json::from_slice(&bytes)
            .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
        if doc.schema_version > SCHEMA_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "collection schema {} is newer than {SCHEMA_VERSION}",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    fn save(&self, doc: &CollectionDoc) -> Result<()> {
        let dir = self.dir(doc.id());
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(DOC_NAME), &serde_json::to_vec_pretty(doc)?)
    }

    pub fn list(&self) -> Result<Vec<Collection>> {
        let mut out = Vec::new();
        for dir in self.collection_dirs()? {
            let id = dir
                .file_name()
                .expect("dir name")
                .to_string_lossy()
                .into_owned();
            match self.load(&id) {
                Ok(doc) => out.push(doc.collection),
                Err(Error::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    pub fn create_collection(&self, title: &str) -> Result<CollectionDoc> {
        let _guard = self.create_lock.lock().unwrap_or_else(|e| e.into_inner());
        let next = self
            .collection_dirs()?
            .iter()
            .filter_map(|d| {
                d.file_name()?
                    .to_str()?
                    .strip_prefix('c')?
                    .parse::<u64>()
                    .ok()
            })
            .max()
            .unwrap_or(0)
            + 1;
        let doc = CollectionDoc {
            schema_version: SCHEMA_VERSION,
            version: 1,
            collection: Collection {
                id: format!("c{next}"),
                title: title.to_string(),
                created_at: now_unix(),
            },
            frame_origin: None,
            videos: Vec::new(),
            camera_fixes: Vec::new(),
            markings: Vec::new(),
            offsets: Vec::new(),
            timeline: None,
            estimates: Vec::new(),
            next_video: 1,
            next_estimate: 1,
        };
        self.save(&doc)?;
        Ok(doc)
    }

    pub fn delete_collection(&self, id: &str) -> Result<()> {
        let lock = self.lock_for(id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        self.load(id)?;
        // Removing the document first makes the deletion atomic for readers.
        fs::remove_file(self.dir(id).join(DOC_NAME))?;
        fs::remove_dir_all(self.dir(id))?;
        Ok(())
    }

    /// Read-modify-write under the collection lock. With `expected` set, the
    /// stored version must match or the update fails with `Conflict`.
    pub fn update<T>(
        &self,
        id: &str,
        expected: Option<u64>,
        f: impl FnOnce(&mut CollectionDoc) -> Result<T>,
    ) -> Result<(T, u64)> {
        let lock = self.lock_for(id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut doc = self.load(id)?;
        if let Some(expected) = expected {
            if expected != doc.version {
                return Err(Error::Conflict {
                    expected,
                    actual: doc.version,
                });
            }
        }
        let out = f(&mut doc)?;
        doc.version += 1;
        self.save(&doc)?;
        Ok((out, doc.version))
    }

    /// Collection id owning a video id of the form `<collection>-v<n>`.
    pub fn collection_of(video_id: &str) -> Result<&str> {
        video_id
            .rsplit_once("-v")
            .map(|(c, _)| c)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::NotFound(format!("video {video_id}")))
    }

    pub fn find_video(&self, video_id: &str) -> Result<(CollectionDoc, VideoRecord)> {
        let doc = self.load(Self::collection_of(video_id)?)?;
        let v = doc.video(video_id)?.clone();
        Ok((doc, v))
    }

    pub fn add_video(&self, collection: &str, new: NewVideo) -> Result<VideoRecord> {
        check_finite_positive(new.duration, "duration")?;
        check_finite_positive(new.fps, "fps")?;
        let (v, _) = self.update(collection, None, |doc| {
            let v = VideoRecord {
                id: format!("{}-v{}", doc.id(), doc.next_video),
                collection_id: doc.id().to_string(),
                title: new.title,
                duration: new.duration,
                fps: new.fps,
                audio_path: new.audio_path,
                notes: new.notes,
            };
            doc.next_video += 1;
            doc.videos.push(v.clone());
            Ok(v)
        })?;
        Ok(v)
    }

    /// Removes a video with its fixes, markings and offsets. The timeline is
    /// dropped since it no longer matches the offset graph.
    pub fn delete_video(&self, video_id: &str) -> Result<u64> {
        let cid = Self::collection_of(video_id)?.to_string();
        let ((), version) = self.update(&cid, None, |doc| {
            doc.video(video_id)?;
            doc.videos.retain(|v| v.id != video_id);
            doc.camera_fixes.retain(|f| f.video_id != video_id);
            doc.markings.retain(|m| m.video_id != video_id);
            doc.offsets
                .retain(|o| o.video_i != video_id && o.video_j != video_id);
            doc.timeline = None;
            Ok(())
        })?;
        Ok(version)
    }

    pub fn set_camera_fix(&self, fix: CameraFix, expected: Option<u64>) -> Result<u64> {
        fix.position.validate()?;
        let cid = Self::collection_of(&fix.video_id)?.to_string();
        let ((), version) = self.update(&cid, expected, |doc| {
            let v = doc.video(&fix.video_id)?;
            if !(fix.valid_at.is_finite() && (0.0..=v.duration).contains(&fix.valid_at)) {
                return Err(Error::validation("valid_at outside the video"));
            }
            if doc.frame_origin.is_none() {
                doc.frame_origin = Some(fix.position);
            }
            match doc
                .camera_fixes
                .iter_mut()
                .find(|f| f.video_id == fix.video_id)
            {
                Some(f) => *f = fix,
                None => doc.camera_fixes.push(fix),
            }
            Ok(())
        })?;
        Ok(version)
    }

    /// Inserts or replaces the marking for `(video, gunshot)`.
    pub fn set_marking(&self, m: Marking, expected: Option<u64>) -> Result<u64> {
        let cid = Self::collection_of(&m.video_id)?.to_string();
        let ((), version) = self.update(&cid, expected, |doc| {
            validate_marking(&m, doc.video(&m.video_id)?)?;
            match doc
                .markings
                .iter_mut()
                .find(|x| x.video_id == m.video_id && x.gunshot_index == m.gunshot_index)
            {
                Some(x) => *x = m,
                None => doc.markings.push(m),
            }
            Ok(())
        })?;
        Ok(version)
    }

    pub fn add_estimate(
        &self,
        collection: &str,
        gunshot_index: u32,
        method: EstimateMethod,
        inputs: Value,
        outputs: Value,
    ) -> Result<EstimateRecord> {
        let (rec, _) = self.update(collection, None, |doc| {
            let rec = EstimateRecord {
                id: format!("e{}", doc.next_estimate),
                gunshot_index,
                method,
                inputs,
                outputs,
                created_at: now_unix(),
            };
            doc.next_estimate += 1;
            doc.estimates.push(rec.clone());
            Ok(rec)
        })?;
        Ok(rec)
    }

    /// Zip of the collection document and its artifacts, with fixed entry
    /// timestamps and sorted names.
    pub fn export_collection<W: Write + Seek>(&self, id: &str, out: W) -> Result<()> {
        let lock = self.lock_for(id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let doc = self.load(id)?;
        let mut files: Vec<(String, Vec<u8>)> =
            vec![(DOC_NAME.to_string(), serde_json::to_vec_pretty(&doc)?)];
        let art = self.dir(id).join("artifacts");
        if let Ok(entries) = fs::read_dir(&art) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                if !name.contains(TMP_MARK) && e.file_type().map(|t| t.is_file()).unwrap_or(false) {
                    files.push((format!("artifacts/{name}"), fs::read(e.path())?));
                }
            }
        }
        files.sort();
        let zip_err = |e: zip::result::ZipError| Error::Io(e.to_string());
        let mut zw = zip::ZipWriter::new(out);
        let opts = SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated)
            .last_modified_time(zip::DateTime::default())
            .unix_permissions(0o644);
        for (name, bytes) in files {
            zw.start_file(name, opts).map_err(zip_err)?;
            zw.write_all(&bytes)?;
        }
        zw.finish().map_err(zip_err)?;
        Ok(())
    }

    /// Restores an exported collection under its original id.
    pub fn import_collection<R: Read + Seek>(&self, input: R) -> Result<String> {
        let zip_err = |e: zip::result::ZipError| Error::CorruptFile(e.to_string());
        let mut za = zip::ZipArchive::new(input).map_err(zip_err)?;
        let mut doc_bytes = Vec::new();
        za.by_name(DOC_NAME)
            .map_err(zip_err)?
            .read_to_end(&mut doc_bytes)?;
        let doc: CollectionDoc = serde_json::from_slice(&doc_bytes)?;
        if doc.schema_version > SCHEMA_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "schema {}",
                doc.schema_version
            )));
        }
        let id = doc.id().to_string();
        Self::valid_id(&id)?;
        let _guard = self.create_lock.lock().unwrap_or_else(|e| e.into_inner());
        if self.dir(&id).join(DOC_NAME).exists() {
            return Err(Error::Integrity(format!("collection {id} already exists")));
        }
        for i in 0..za.len() {
            let mut f = za.by_index(i).map_err(zip_err)?;
            let Some(name) = f.enclosed_name() else {
                continue;
            };
            let Some(file) = name
                .strip_prefix("artifacts")
                .ok()
                .and_then(|p| p.to_str())
                .map(str::to_string)
            else {
                continue;
            };
            if file.is_empty() || file.contains('/') {
                continue;
            }
            let mut bytes = Vec::new();
            f.read_to_end(&mut bytes)?;
            self.write_artifact(&id, &file, &bytes)?;
        }
        // Written last so a failed import leaves no visible collection.
        let dir = self.dir(&id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(DOC_NAME), &doc_bytes)?;
        Ok(id)
    }
}
