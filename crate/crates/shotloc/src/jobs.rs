//! In-process job queue with a fixed pool of worker threads.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{self, FuseParams, M1Request, M2Request, SyncParams};
use crate::store::{write_atomic, EstimateMethod, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Sync,
    Detect,
    EstimateM1,
    EstimateM2,
    Fuse,
}

impl JobKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobKind::Sync => "sync",
            JobKind::Detect => "detect",
            JobKind::EstimateM1 => "estimate_m1",
            JobKind::EstimateM2 => "estimate_m2",
            JobKind::Fuse => "fuse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "sync" => JobKind::Sync,
            "detect" => JobKind::Detect,
            "estimate_m1" | "m1" => JobKind::EstimateM1,
            "estimate_m2" | "m2" => JobKind::EstimateM2,
            "fuse" => JobKind::Fuse,
            _ => return Err(Error::NotFound(format!("job kind {s}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Error,
}

fn default_ratio_db() -> f64 {
    12.0
}

fn default_min_sep_ms() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub video_id: String,
    /// Onset threshold over the running median, dB.
    #[serde(default = "default_ratio_db")]
    pub ratio_db: f64,
    #[serde(default = "default_min_sep_ms")]
    pub min_sep_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseRequest {
    pub gunshot: u32,
    #[serde(flatten)]
    pub params: FuseParams,
}

/// A typed job body.
#[derive(Debug, Clone, PartialEq)]
pub enum JobRequest {
    Sync(SyncParams),
    Detect(DetectRequest),
    EstimateM1(M1Request),
    EstimateM2(M2Request),
    Fuse(FuseRequest),
}

impl JobRequest {
    pub fn parse(kind: JobKind, body: Value) -> Result<Self> {
        let bad =
            |e: serde_json::Error| Error::validation(format!("{} request: {e}", kind.as_str()));
        Ok(match kind {
            JobKind::Sync => JobRequest::Sync(serde_json::from_value(body).map_err(bad)?),
            JobKind::Detect => JobRequest::Detect(serde_json::from_value(body).map_err(bad)?),
            JobKind::EstimateM1 => {
                JobRequest::EstimateM1(serde_json::from_value(body).map_err(bad)?)
            }
            JobKind::EstimateM2 => {
                JobRequest::EstimateM2(serde_json::from_value(body).map_err(bad)?)
            }
            JobKind::Fuse => JobRequest::Fuse(serde_json::from_value(body).map_err(bad)?),
        })
    }

    pub fn kind(&self) -> JobKind {
        match self {
            JobRequest::Sync(_) => JobKind::Sync,
            JobRequest::Detect(_) => JobKind::Detect,
            JobRequest::EstimateM1(_) => JobKind::EstimateM1,
            JobRequest::EstimateM2(_) => JobKind::EstimateM2,
            JobRequest::Fuse(_) => JobKind::Fuse,
        }
    }

    fn body(&self) -> Value {
        let v = match self {
            JobRequest::Sync(r) => serde_json::to_value(r),
            JobRequest::Detect(r) => serde_json::to_value(r),
            JobRequest::EstimateM1(r) => serde_json::to_value(r),
            JobRequest::EstimateM2(r) => serde_json::to_value(r),
            JobRequest::Fuse(r) => serde_json::to_value(r),
        };
        v.expect("job bodies serialize")
    }
}

/// Runs a job body to completion on the calling thread.
pub fn execute(
    store: &Store,
    collection: &str,
    req: &JobRequest,
    progress: pipeline::Progress,
) -> Result<Value> {
    Ok(match req {
        JobRequest::Sync(p) => {
            serde_json::to_value(pipeline::sync(store, collection, p, progress)?)?
        }
        JobRequest::Detect(r) => {
            let doc = store.load(collection)?;
            doc.video(&r.video_id)?;
            let clip = pipeline::video_clip(store, &r.video_id)?;
            let t = pipeline::detect(&clip, r.ratio_db, r.min_sep_ms)?;
            progress(1.0);
            json!({ "video_id": r.video_id, "transients": t })
        }
        JobRequest::EstimateM1(r) => {
            serde_json::to_value(pipeline::estimate_m1(store, collection, r, progress)?)?
        }
        JobRequest::EstimateM2(r) => {
            let rec = pipeline::estimate_m2(store, collection, r)?;
            progress(1.0);
            serde_json::to_value(rec)?
        }
        JobRequest::Fuse(r) => serde_json::to_value(pipeline::fuse(
            store, collection, r.gunshot, &r.params, progress,
        )?)?,
    })
}

/// Hash of everything a job's output depends on: kind, collection, body
/// and the stored inputs it reads.
pub fn request_hash(store: &Store, collection: &str, req: &JobRequest) -> Result<String> {
    let doc = store.load(collection)?;
    let mut deps = json!({ "inputs": doc.input_fingerprint() });
    if matches!(req.kind(), JobKind::EstimateM2 | JobKind::Fuse) {
        deps["timeline"] = serde_json::to_value(&doc.timeline)?;
    }
    if req.kind() == JobKind::Fuse {
        let ids: Vec<&str> = doc
            .estimates
            .iter()
            .filter(|e| e.method != EstimateMethod::Fused)
            .map(|e| e.id.as_str())
            .collect();
        deps["estimates"] = json!(ids);
    }
    let canonical = json!({
        "kind": req.kind().as_str(),
        "collection": collection,
        "body": req.body(),
        "deps": deps,
    });
    let digest = Sha256::digest(serde_json::to_vec(&canonical)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub kind: JobKind,
    pub collection_id: String,
    pub status: JobStatus,
    pub progress: f64,
    pub request_hash: String,
    /// Path of the persisted result, relative to the data directory.
    pub result_ref: Option<String>,
    pub error: Option<String>,
    /// Times a worker picked the job up.
    pub runs: u32,
}

struct Job {
    id: String,
    kind: JobKind,
    collection: String,
    request: JobRequest,
    hash: String,
    // f64 bits; non-negative floats order the same as their bit patterns.
    progress: AtomicU64,
    runs: AtomicU32,
    state: Mutex<(JobStatus, Option<String>, Option<String>)>,
}

impl Job {
    fn view(&self) -> JobView {
        let st = self.state.lock().expect("job state");
        JobView {
            id: self.id.clone(),
            kind: self.kind,
            collection_id: self.collection.clone(),
            status: st.0,
            progress: f64::from_bits(self.progress.load(Ordering::Acquire)),
            request_hash: self.hash.clone(),
            result_ref: st.1.clone(),
            error: st.2.clone(),
            runs: self.runs.load(Ordering::Acquire),
        }
    }

    fn report(&self, p: f64) {
        let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        self.progress.fetch_max(p.to_bits(), Ordering::AcqRel);
    }
}

struct Inner {
    store: Arc<Store>,
    jobs: Mutex<BTreeMap<String, Arc<Job>>>,
    by_hash: Mutex<BTreeMap<String, String>>,
    queue: Mutex<VecDeque<Arc<Job>>>,
    wake: Condvar,
    finished: Condvar,
    finished_lock: Mutex<()>,
    shutdown: AtomicBool,
    next: AtomicU64,
}

pub struct JobQueue {
    inner: Arc<Inner>,
    workers: Vec<JoinHandle<()>>,
}

impl JobQueue {
    pub fn new(store: Arc<Store>, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::validation("at least one worker is required"));
        }
        std::fs::create_dir_all(store.root().join("jobs"))?;
        let inner = Arc::new(Inner {
            store,
            jobs: Mutex::new(BTreeMap::new()),
            by_hash: Mutex::new(BTreeMap::new()),
            queue: Mutex::new(VecDeque::new()),
            wake: Condvar::new(),
            finished: Condvar::new(),
            finished_lock: Mutex::new(()),
            shutdown: AtomicBool::new(false),
            next: AtomicU64::new(1),
        });
        let workers = (0..workers)
            .map(|n| {
                let inner = inner.clone();
                std::thread::Builder::new()
                    .name(format!("shotloc-worker-{n}"))
                    .spawn(move || worker(inner))
                    .map_err(|e| Error::Io(e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(JobQueue { inner, workers })
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.inner.store
    }

    /// Queues a job, or returns the existing one for an identical request.
    /// A request whose previous job failed is queued again.
    pub fn submit(&self, collection: &str, kind: JobKind, body: Value) -> Result<JobView> {
        let request = JobRequest::parse(kind, body)?;
        let hash = request_hash(&self.inner.store, collection, &request)?;
        let mut by_hash = self.inner.by_hash.lock().expect("hash index");
        if let Some(id) = by_hash.get(&hash) {
            let job = self.inner.jobs.lock().expect("jobs")[id].clone();
            if job.view().status != JobStatus::Error {
                return Ok(job.view());
            }
        }
        let id = self.fresh_id(&hash);
        let job = Arc::new(Job {
            id: id.clone(),
            kind,
            collection: collection.to_string(),
            request,
            hash: hash.clone(),
            progress: AtomicU64::new(0f64.to_bits()),
            runs: AtomicU32::new(0),
            state: Mutex::new((JobStatus::Queued, None, None)),
        });
        self.inner
            .jobs
            .lock()
            .expect("jobs")
            .insert(id.clone(), job.clone());
        by_hash.insert(hash, id);
        drop(by_hash);
        self.inner
            .queue
            .lock()
            .expect("queue")
            .push_back(job.clone());
        self.inner.wake.notify_one();
        Ok(job.view())
    }

    fn fresh_id(&self, hash: &str) -> String {
        loop {
            let n = self.inner.next.fetch_add(1, Ordering::Relaxed);
            let id = format!("j{n}-{}", &hash[..12]);
            if !result_path(&self.inner.store, &id).exists() {
                return id;
            }
        }
    }

    pub fn get(&self, id: &str) -> Result<JobView> {
        let jobs = self.inner.jobs.lock().expect("jobs");
        jobs.get(id)
            .map(|j| j.view())
            .ok_or_else(|| Error::NotFound(format!("job {id}")))
    }

    pub fn list(&self) -> Vec<JobView> {
        self.inner
            .jobs
            .lock()
            .expect("jobs")
            .values()
            .map(|j| j.view())
            .collect()
    }

    /// Stored output of a finished job.
    pub fn result(&self, id: &str) -> Result<Value> {
        let view = self.get(id)?;
        match view.status {
            JobStatus::Done => {
                let bytes = std::fs::read(result_path(&self.inner.store, id))?;
                Ok(serde_json::from_slice(&bytes)?)
            }
            JobStatus::Error => Err(Error::NotFound(format!(
                "job {id} failed: {}",
                view.error.unwrap_or_default()
            ))),
            _ => Err(Error::NotFound(format!("job {id} has no result yet"))),
        }
    }

    /// Blocks until the job is done or failed.
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<JobView> {
        let deadline = Instant::now() + timeout;
        let mut guard = self.inner.finished_lock.lock().expect("finished lock");
        loop {
            let view = self.get(id)?;
            if matches!(view.status, JobStatus::Done | JobStatus::Error) {
                return Ok(view);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Io(format!("timed out waiting for job {id}")));
            }
            guard = self
                .inner
                .finished
                .wait_timeout(guard, deadline - now)
                .expect("finished lock")
                .0;
        }
    }
}

impl Drop for JobQueue {
    fn drop(&mut self) {
        self.inner.shutdown.store(true, Ordering::Release);
        self.inner.wake.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

pub fn result_path(store: &Store, id: &str) -> PathBuf {
    store.root().join("jobs").join(format!("{id}.result.json"))
}

fn worker(inner: Arc<Inner>) {
    loop {
        let job = {
            let mut q = inner.queue.lock().expect("queue");
            loop {
                if inner.shutdown.load(Ordering::Acquire) {
                    return;
                }
                if let Some(j) = q.pop_front() {
                    break j;
                }
                q = inner.wake.wait(q).expect("queue");
            }
        };
        job.runs.fetch_add(1, Ordering::AcqRel);
        job.state.lock().expect("job state").0 = JobStatus::Running;
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let mut progress = |p: f64| job.report(p);
            let value = execute(&inner.store, &job.collection, &job.request, &mut progress)?;
            let mut bytes = serde_json::to_vec_pretty(&value)?;
            bytes.push(b'\n');
            write_atomic(&result_path(&inner.store, &job.id), &bytes)?;
            Ok::<_, Error>(())
        }));
        {
            let mut st = job.state.lock().expect("job state");
            match outcome {
                Ok(Ok(())) => {
                    job.report(1.0);
                    *st = (
                        JobStatus::Done,
                        Some(format!("jobs/{}.result.json", job.id)),
                        None,
                    );
                }
                Ok(Err(e)) => *st = (JobStatus::Error, None, Some(format!("{}: {e}", e.kind()))),
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "worker panicked".into());
                    *st = (JobStatus::Error, None, Some(format!("internal: {msg}")));
                }
            }
        }
        let _guard = inner.finished_lock.lock().expect("finished lock");
        inner.finished.notify_all();
    }
}
