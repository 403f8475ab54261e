//! Pipeline stages over the store, shared by the CLI and the service.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use shotloc_core::audio::{self, AudioClip, Spectrogram, Transient};
use shotloc_core::ballistics::{self, DistanceEstimate, Method1Inputs, DEFAULT_SAMPLES};
use shotloc_core::fusion::{
    self, FuseMode, GridSpec, Heatmap, DEFAULT_CELL_M, DEFAULT_REGION_THRESHOLD,
};
use shotloc_core::geo::{self, EnuPoint, GeoPoint, LocalFrame};
use shotloc_core::oracle::{self, ArrivalReport, Placement, Scene, SceneConstraints, SynthOptions};
use shotloc_core::sync::{self, FrameMark, GlobalTimeline, PairwiseOffset, SyncError};
use shotloc_core::tdoa::{self, CenterLine, HyperbolaBand, TdoaInputs, DEFAULT_SYNC_EPSILON};
use shotloc_core::Interval;

use crate::error::{Error, Result};
use crate::formats::{self, props, round_to};
use crate::store::{
    CameraFix, CollectionDoc, ConfirmedBy, EstimateMethod, EstimateRecord, Marking, NewVideo, Store,
};
use crate::wav;

pub type Progress<'a> = &'a mut dyn FnMut(f64);

pub fn default_vs() -> Interval {
    Interval::new(331.3, 346.0)
}

fn default_alpha() -> Interval {
    Interval::new(0.0, 15.0)
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

fn default_epsilon() -> f64 {
    DEFAULT_SYNC_EPSILON
}

fn default_extent() -> f64 {
    2_000.0
}

fn default_step() -> f64 {
    2.0
}

fn default_cell() -> f64 {
    DEFAULT_CELL_M
}

fn default_margin() -> f64 {
    1_000.0
}

fn default_threshold() -> f64 {
    DEFAULT_REGION_THRESHOLD
}

fn default_max_lag() -> f64 {
    30.0
}

fn default_true() -> bool {
    true
}

// ---- ingest ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub title: String,
    /// WAV track of the video.
    #[serde(default)]
    pub audio_path: Option<String>,
    pub fps: f64,
    /// Seconds; taken from the WAV when absent.
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub camera: Option<GeoPoint>,
}

pub fn ingest(
    store: &Store,
    collection: &str,
    req: IngestRequest,
) -> Result<crate::store::VideoRecord> {
    let audio_path = req.audio_path.map(|p| path_string(Path::new(&p)));
    let clip_duration = audio_path
        .as_ref()
        .map(wav::load_wav)
        .transpose()?
        .map(|c| c.duration());
    let duration = req
        .duration
        .or(clip_duration)
        .ok_or_else(|| Error::validation("duration is required without an audio track"))?;
    let video = store.add_video(
        collection,
        NewVideo {
            title: req.title,
            duration,
            fps: req.fps,
            audio_path,
            notes: req.notes,
        },
    )?;
    if let Some(position) = req.camera {
        store.set_camera_fix(
            CameraFix {
                video_id: video.id.clone(),
                position,
                valid_at: 0.0,
            },
            None,
        )?;
    }
    Ok(video)
}

// ---- audio ----

pub fn video_clip(store: &Store, video_id: &str) -> Result<AudioClip> {
    let (_, v) = store.find_video(video_id)?;
    let path = v
        .audio_path
        .ok_or_else(|| Error::validation(format!("video {video_id} has no audio track")))?;
    let mut clip = wav::load_wav(path)?;
    clip.source_video = video_id.to_string();
    Ok(clip)
}

pub fn detect(clip: &AudioClip, ratio_db: f64, min_sep_ms: f64) -> Result<Vec<Transient>> {
    if !(ratio_db.is_finite() && min_sep_ms.is_finite() && min_sep_ms >= 0.0) {
        return Err(Error::validation("ratio and separation must be finite"));
    }
    Ok(audio::detect_transients(clip, ratio_db, min_sep_ms))
}

pub fn spectrogram(clip: &AudioClip, window: usize, hop: usize) -> Result<Spectrogram> {
    Ok(audio::spectrogram(clip, window, hop)?)
}

// ---- sync ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualMatch {
    pub video_i: String,
    pub frame_i: u64,
    pub video_j: String,
    pub frame_j: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncParams {
    /// Correlate every pair of audio tracks.
    #[serde(default = "default_true")]
    pub audio: bool,
    /// Largest offset searched, seconds.
    #[serde(default = "default_max_lag")]
    pub max_lag: f64,
    #[serde(default)]
    pub manual: Vec<ManualMatch>,
    /// Video pinned at global time zero; defaults to the smallest id.
    #[serde(default)]
    pub anchor: Option<String>,
}

impl Default for SyncParams {
    fn default() -> Self {
        SyncParams {
            audio: true,
            max_lag: default_max_lag(),
            manual: Vec::new(),
            anchor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub timeline: GlobalTimeline,
    pub offsets: Vec<PairwiseOffset>,
    /// Audio estimates rejected for low confidence.
    pub flagged: Vec<PairwiseOffset>,
}

pub fn sync(
    store: &Store,
    collection: &str,
    params: &SyncParams,
    progress: Progress,
) -> Result<SyncReport> {
    let doc = store.load(collection)?;
    let mut new_edges = Vec::new();
    let mut flagged = Vec::new();
    if params.audio {
        let with_audio: Vec<_> = doc
            .videos
            .iter()
            .filter(|v| v.audio_path.is_some())
            .collect();
        let clips = with_audio
            .iter()
            .map(|v| video_clip(store, &v.id))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(usize, usize)> = (0..clips.len())
            .flat_map(|i| (i + 1..clips.len()).map(move |j| (i, j)))
            .collect();
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let lag = params
                .max_lag
                .min(clips[i].duration())
                .min(clips[j].duration());
            match sync::estimate_offset(&clips[i], &clips[j], lag) {
                Ok(o) => new_edges.push(o),
                Err(SyncError::InsufficientOverlap { estimate }) => flagged.push(estimate),
                Err(e) => return Err(e.into()),
            }
            progress(0.9 * (k + 1) as f64 / pairs.len() as f64);
        }
    }
    for m in &params.manual {
        let mark = |video: &str, frame| -> Result<FrameMark> {
            let v = doc.video(video)?;
            Ok(FrameMark {
                video: v.id.clone(),
                frame,
                fps: v.fps,
                duration: v.duration,
            })
        };
        new_edges.push(sync::refine_manual(
            &mark(&m.video_i, m.frame_i)?,
            &mark(&m.video_j, m.frame_j)?,
        )?);
    }
    let anchor = params.anchor.clone();
    let (report, _) = store.update(collection, None, move |doc| {
        for e in new_edges {
            sync::upsert_offset(&mut doc.offsets, e);
        }
        let anchor = match anchor {
            Some(a) => a,
            None => doc
                .offsets
                .iter()
                .flat_map(|o| [o.video_i.clone(), o.video_j.clone()])
                .min()
                .ok_or_else(|| {
                    Error::Infeasible("no offsets: every audio pair was ambiguous".into())
                })?,
        };
        let timeline = sync::aggregate_timeline(&doc.offsets, &anchor)?;
        doc.timeline = Some(timeline.clone());
        Ok(SyncReport {
            timeline,
            offsets: doc.offsets.clone(),
            flagged,
        })
    })?;
    progress(1.0);
    Ok(report)
}

// ---- marking ----

pub fn mark(store: &Store, m: Marking, expected: Option<u64>) -> Result<u64> {
    store.set_marking(m, expected)
}

// ---- method 1 ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M1Params {
    /// Speed of sound, m/s.
    #[serde(default = "default_vs")]
    pub vs: Interval,
    /// Bullet speed, m/s.
    pub vb: Interval,
    /// Camera angle off the trajectory, degrees.
    #[serde(default = "default_alpha")]
    pub alpha_deg: Interval,
    /// Shooter elevation above the camera, meters.
    #[serde(default)]
    pub shooter_elev: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl M1Params {
    pub fn inputs(&self, t_diff: f64) -> Method1Inputs {
        Method1Inputs {
            vs_range: self.vs,
            vb_range: self.vb,
            alpha_range_deg: self.alpha_deg,
            t_diff,
            shooter_elev: self.shooter_elev,
            samples: self.samples,
            seed: self.seed,
        }
    }
}

pub fn m1_standalone(
    t_diff: f64,
    params: &M1Params,
    progress: Progress,
) -> Result<DistanceEstimate> {
    let inputs = params.inputs(t_diff);
    inputs.validate()?;
    Ok(ballistics::estimate_method1_with_progress(
        &inputs, progress,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M1Request {
    pub video_id: String,
    pub gunshot: u32,
    #[serde(flatten)]
    pub params: M1Params,
}

pub fn estimate_m1(
    store: &Store,
    collection: &str,
    req: &M1Request,
    progress: Progress,
) -> Result<EstimateRecord> {
    let doc = store.load(collection)?;
    doc.video(&req.video_id)?;
    let m = doc.marking(&req.video_id, req.gunshot).ok_or_else(|| {
        Error::validation(format!(
            "no marking for {} gunshot {}",
            req.video_id, req.gunshot
        ))
    })?;
    let shock = m
        .shock_time
        .ok_or_else(|| Error::validation("method 1 needs a marked shockwave"))?;
    let t_diff = m.muzzle_time - shock;
    let est = m1_standalone(t_diff, &req.params, progress)?;
    let inputs = json!({
        "video_id": req.video_id,
        "gunshot": req.gunshot,
        "t_diff": t_diff,
        "camera": doc.fix(&req.video_id).map(|f| f.position),
        "params": req.params,
    });
    store.add_estimate(
        collection,
        req.gunshot,
        EstimateMethod::M1,
        inputs,
        serde_json::to_value(est)?,
    )
}

// ---- method 2 ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M2Params {
    #[serde(default = "default_vs")]
    pub vs: Interval,
    /// Timing tolerance, seconds.
    #[serde(default = "default_epsilon")]
    pub sync_epsilon: f64,
    #[serde(default)]
    pub center_line: CenterLine,
    /// Half-length of emitted hyperbola arms, meters.
    #[serde(default = "default_extent")]
    pub extent: f64,
    /// Vertex spacing of emitted polylines, meters.
    #[serde(default = "default_step")]
    pub step: f64,
}

impl Default for M2Params {
    fn default() -> Self {
        M2Params {
            vs: default_vs(),
            sync_epsilon: default_epsilon(),
            center_line: CenterLine::Mean,
            extent: default_extent(),
            step: default_step(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M2Output {
    pub band: HyperbolaBand,
    pub video_pair: [String; 2],
    pub lines: Vec<Value>,
    pub warnings: Vec<String>,
}

/// Band and polylines for two cameras in a local frame; `hear_*` on a shared
/// clock.
pub fn m2_standalone(
    cam_a: EnuPoint,
    hear_a: f64,
    cam_b: EnuPoint,
    hear_b: f64,
    params: &M2Params,
) -> Result<(HyperbolaBand, tdoa::BandGeometry)> {
    let inputs = TdoaInputs {
        cam_a,
        hear_a,
        cam_b,
        hear_b,
        vs_range: params.vs,
        sync_epsilon: params.sync_epsilon,
        center_line: params.center_line,
    };
    let band = tdoa::band(&inputs)?;
    let geometry = tdoa::band_geometry(&band, params.extent, params.step)?;
    Ok((band, geometry))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct M2Request {
    pub video_a: String,
    pub video_b: String,
    pub gunshot: u32,
    #[serde(flatten, default)]
    pub params: M2Params,
}

fn camera_enu(doc: &CollectionDoc, frame: &LocalFrame, video: &str) -> Result<EnuPoint> {
    let fix = doc
        .fix(video)
        .ok_or_else(|| Error::validation(format!("video {video} has no camera fix")))?;
    Ok(geo::to_enu(frame, &fix.position)?)
}

fn global_muzzle(doc: &CollectionDoc, video: &str, gunshot: u32) -> Result<f64> {
    let m = doc
        .marking(video, gunshot)
        .ok_or_else(|| Error::validation(format!("no marking for {video} gunshot {gunshot}")))?;
    let tl = doc
        .timeline
        .as_ref()
        .ok_or_else(|| Error::validation("collection is not synchronized"))?;
    tl.to_global(video, m.muzzle_time)
        .ok_or_else(|| Error::validation(format!("video {video} is not on the timeline")))
}

pub fn estimate_m2(store: &Store, collection: &str, req: &M2Request) -> Result<EstimateRecord> {
    let doc = store.load(collection)?;
    if req.video_a == req.video_b {
        return Err(Error::validation("method 2 needs two different videos"));
    }
    let frame = doc.frame()?;
    let tl = doc
        .timeline
        .as_ref()
        .ok_or_else(|| Error::validation("collection is not synchronized"))?;
    if tl.components.get(&req.video_a) != tl.components.get(&req.video_b) {
        return Err(Error::validation("videos are in different sync components"));
    }
    let hear_a = global_muzzle(&doc, &req.video_a, req.gunshot)?;
    let hear_b = global_muzzle(&doc, &req.video_b, req.gunshot)?;
    let cam_a = camera_enu(&doc, &frame, &req.video_a)?;
    let cam_b = camera_enu(&doc, &frame, &req.video_b)?;
    let (band, geometry) = m2_standalone(cam_a, hear_a, cam_b, hear_b, &req.params)?;
    let lines = geometry
        .lines
        .iter()
        .map(|l| json!({ "role": l.role.as_str(), "two_a": l.two_a, "most_likely": l.most_likely }))
        .collect();
    let out = M2Output {
        band,
        video_pair: [req.video_a.clone(), req.video_b.clone()],
        lines,
        warnings: geometry.warnings,
    };
    let inputs = json!({
        "video_a": req.video_a,
        "video_b": req.video_b,
        "gunshot": req.gunshot,
        "hear_a": hear_a,
        "hear_b": hear_b,
        "camera_a": doc.fix(&req.video_a).map(|f| f.position),
        "camera_b": doc.fix(&req.video_b).map(|f| f.position),
        "frame_origin": doc.frame_origin,
        "params": req.params,
    });
    store.add_estimate(
        collection,
        req.gunshot,
        EstimateMethod::M2,
        inputs,
        serde_json::to_value(out)?,
    )
}

// ---- fusion ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseParams {
    /// Cell size, meters.
    #[serde(default = "default_cell")]
    pub cell: f64,
    /// Grid padding around the cameras when no ring bounds it, meters.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub mode: FuseMode,
    /// Source height in the local frame, meters; defaults to camera height
    /// plus the shooter elevation used by method 1.
    #[serde(default)]
    pub plane_up: Option<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl Default for FuseParams {
    fn default() -> Self {
        FuseParams {
            cell: default_cell(),
            margin: default_margin(),
            mode: FuseMode::Product,
            plane_up: None,
            threshold: default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub peak: f64,
    pub cells: usize,
    pub centroid: EnuPoint,
    pub centroid_geo: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseOutput {
    pub grid: GridSpec,
    pub layers: Vec<String>,
    pub sources: Vec<String>,
    pub threshold: f64,
    pub regions: Vec<RegionSummary>,
    pub grid_file: String,
    pub geojson_file: String,
}

struct Sources<'a> {
    m1: Vec<(&'a EstimateRecord, String, DistanceEstimate, f64)>,
    m2: Vec<(&'a EstimateRecord, M2Output)>,
}

/// Latest method 1 record per video and method 2 record per pair.
fn sources(doc: &CollectionDoc, gunshot: u32) -> Result<Sources<'_>> {
    let mut m1 = Vec::new();
    let mut m2 = Vec::new();
    let mut seen_video = BTreeSet::new();
    let mut seen_pair = BTreeSet::new();
    for rec in doc
        .estimates
        .iter()
        .rev()
        .filter(|e| e.gunshot_index == gunshot)
    {
        match rec.method {
            EstimateMethod::M1 => {
                let video = rec.inputs["video_id"]
                    .as_str()
                    .unwrap_or_default()
                    .to_string();
                if doc.fix(&video).is_some() && seen_video.insert(video.clone()) {
                    let est: DistanceEstimate = serde_json::from_value(rec.outputs.clone())?;
                    let de = rec.inputs["params"]["shooter_elev"].as_f64().unwrap_or(0.0);
                    m1.push((rec, video, est, de));
                }
            }
            EstimateMethod::M2 => {
                let out: M2Output = serde_json::from_value(rec.outputs.clone())?;
                let mut key = out.video_pair.clone();
                key.sort();
                if seen_pair.insert(key) {
                    m2.push((rec, out));
                }
            }
            EstimateMethod::Fused => {}
        }
    }
    m1.reverse();
    m2.reverse();
    Ok(Sources { m1, m2 })
}

fn snap_down(x: f64, cell: f64) -> f64 {
    (x / cell).floor() * cell
}

fn snap_up(x: f64, cell: f64) -> f64 {
    (x / cell).ceil() * cell
}

pub fn fuse(
    store: &Store,
    collection: &str,
    gunshot: u32,
    params: &FuseParams,
    progress: Progress,
) -> Result<EstimateRecord> {
    if !(params.cell > 0.0 && params.cell.is_finite() && params.margin >= 0.0) {
        return Err(Error::validation("cell must be > 0 and margin >= 0"));
    }
    let doc = store.load(collection)?;
    let frame = doc.frame()?;
    let src = sources(&doc, gunshot)?;
    if src.m1.is_empty() && src.m2.is_empty() {
        return Err(Error::validation(format!(
            "no estimates for gunshot {gunshot}"
        )));
    }
    let cams: Vec<EnuPoint> = doc
        .camera_fixes
        .iter()
        .map(|f| geo::to_enu(&frame, &f.position))
        .collect::<Result<_, _>>()?;
    let reach = src
        .m1
        .iter()
        .map(|(_, _, e, _)| e.dh_max + params.cell)
        .fold(0.0, f64::max);
    let pad = if src.m1.is_empty() {
        params.margin
    } else {
        reach
    };
    let (mut lo_e, mut lo_n, mut hi_e, mut hi_n) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for c in &cams {
        lo_e = lo_e.min(c.east - pad);
        lo_n = lo_n.min(c.north - pad);
        hi_e = hi_e.max(c.east + pad);
        hi_n = hi_n.max(c.north + pad);
    }
    if params.mode == FuseMode::Product {
        // Outside any one ring's square the product is zero.
        for (_, video, est, _) in &src.m1 {
            let c = camera_enu(&doc, &frame, video)?;
            let r = est.dh_max + params.cell;
            lo_e = lo_e.max(c.east - r);
            lo_n = lo_n.max(c.north - r);
            hi_e = hi_e.min(c.east + r);
            hi_n = hi_n.min(c.north + r);
        }
        if lo_e >= hi_e || lo_n >= hi_n {
            return Err(Error::Infeasible(
                "AllZero: the distance rings do not overlap".into(),
            ));
        }
    }
    let plane_up = match params.plane_up {
        Some(u) => u,
        None if !src.m1.is_empty() => {
            let mut total = 0.0;
            for (_, video, _, de) in &src.m1 {
                total += camera_enu(&doc, &frame, video)?.up + de;
            }
            total / src.m1.len() as f64
        }
        None => cams.iter().map(|c| c.up).sum::<f64>() / cams.len().max(1) as f64,
    };
    let grid = GridSpec {
        frame,
        min_east: snap_down(lo_e, params.cell),
        min_north: snap_down(lo_n, params.cell),
        max_east: snap_up(hi_e, params.cell),
        max_north: snap_up(hi_n, params.cell),
        cell: params.cell,
        plane_up,
    };
    grid.validate()?;

    let total = (src.m1.len() + src.m2.len()) as f64;
    let mut layers = Vec::new();
    let mut source_ids = Vec::new();
    for (rec, video, est, _) in &src.m1 {
        let cam = camera_enu(&doc, &frame, video)?;
        let done = layers.len() as f64;
        let mut sub = |f: f64| progress(0.9 * (done + f) / total);
        layers.push(fusion::layer_from_annulus_with_progress(
            est,
            &cam,
            &grid,
            format!("{}:m1:{video}", rec.id),
            &mut sub,
        )?);
        source_ids.push(rec.id.clone());
    }
    for (rec, out) in &src.m2 {
        let label = format!("{}:m2:{}+{}", rec.id, out.video_pair[0], out.video_pair[1]);
        let done = layers.len() as f64;
        let mut sub = |f: f64| progress(0.9 * (done + f) / total);
        layers.push(fusion::layer_from_band_with_progress(
            &out.band, &grid, label, &mut sub,
        )?);
        source_ids.push(rec.id.clone());
    }
    let heat = fusion::fuse_with_threshold(&layers, params.mode, params.threshold)?;

    let dump = formats::heatmap_dump(&heat).to_text();
    let hash = hex8(dump.as_bytes());
    let grid_file = format!("heatmap-g{gunshot}-{hash}.grid");
    store.write_artifact(collection, &grid_file, dump.as_bytes())?;
    let regions = heat
        .argmax_region
        .iter()
        .map(|r| {
            Ok(RegionSummary {
                peak: r.peak,
                cells: r.cells.len(),
                centroid: r.centroid,
                centroid_geo: geo::from_enu(&heat.grid.frame, &r.centroid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let geojson_file = format!("gunshot-{gunshot}.geojson");
    let out = FuseOutput {
        grid: heat.grid.clone(),
        layers: heat.layers.clone(),
        sources: source_ids,
        threshold: heat.threshold,
        regions,
        grid_file,
        geojson_file: geojson_file.clone(),
    };
    let inputs = json!({ "gunshot": gunshot, "params": params, "sources": out.sources });
    let rec = store.add_estimate(
        collection,
        gunshot,
        EstimateMethod::Fused,
        inputs,
        serde_json::to_value(&out)?,
    )?;
    let doc = store.load(collection)?;
    let gj = gunshot_geojson(&doc, gunshot, Some(&heat))?;
    store.write_artifact(collection, &geojson_file, geojson_bytes(&gj).as_slice())?;
    progress(1.0);
    Ok(rec)
}

fn hex8(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(4)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn geojson_bytes(v: &Value) -> Vec<u8> {
    let mut out = serde_json::to_vec(v).expect("geojson serializes");
    out.push(b'\n');
    out
}

/// Loads the heatmap of a fused record from its grid dump.
pub fn load_heatmap(store: &Store, collection: &str, rec: &EstimateRecord) -> Result<Heatmap> {
    let out: FuseOutput = serde_json::from_value(rec.outputs.clone())?;
    let text = std::fs::read(store.artifact_path(collection, &out.grid_file))?;
    let dump = formats::GridDump::parse(text.as_slice())?;
    let scores: Vec<f64> = dump.rows.into_iter().flatten().collect();
    if scores.len() != out.grid.len() {
        return Err(Error::CorruptFile(format!(
            "{} does not match its grid",
            out.grid_file
        )));
    }
    // Regions are recomputed from the stored scores.
    let layer = fusion::Layer {
        grid: out.grid.clone(),
        scores,
        label: "stored".into(),
    };
    let mut heat = fusion::fuse_with_threshold(&[layer], FuseMode::Sum, out.threshold)?;
    heat.layers = out.layers;
    Ok(heat)
}

fn r3(x: f64) -> Value {
    json!(round_to(x, 3))
}

/// Everything estimated for one gunshot: cameras, rings, hyperbolas and the
/// fused argmax region with its centroid.
pub fn gunshot_geojson(doc: &CollectionDoc, gunshot: u32, heat: Option<&Heatmap>) -> Result<Value> {
    let frame = doc.frame()?;
    let mut features = Vec::new();
    let mut fixes: Vec<&CameraFix> = doc.camera_fixes.iter().collect();
    fixes.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    for f in fixes {
        let p = geo::to_enu(&frame, &f.position)?;
        let title = doc
            .video(&f.video_id)
            .map(|v| v.title.clone())
            .unwrap_or_default();
        features.push(formats::point(
            &frame,
            &p,
            props([
                ("role", json!("camera")),
                ("video_id", json!(f.video_id)),
                ("title", json!(title)),
            ]),
        )?);
    }
    let src = sources(doc, gunshot)?;
    for (rec, video, est, _) in &src.m1 {
        let cam = camera_enu(doc, &frame, video)?;
        features.push(formats::annulus(
            &frame,
            &cam,
            est.dh_min,
            est.dh_max,
            props([
                ("method", json!("m1")),
                ("role", json!("annulus")),
                ("video_id", json!(video)),
                ("gunshot_index", json!(gunshot)),
                ("estimate_id", json!(rec.id)),
                ("dh_min", r3(est.dh_min)),
                ("dh_max", r3(est.dh_max)),
                ("dh_mean", r3(est.dh_mean)),
            ]),
        )?);
    }
    for (rec, out) in &src.m2 {
        let params: M2Params =
            serde_json::from_value(rec.inputs["params"].clone()).unwrap_or_default();
        let geometry = tdoa::band_geometry(&out.band, params.extent, params.step)?;
        for line in &geometry.lines {
            features.push(formats::line_string(
                &frame,
                &line.points,
                props([
                    ("method", json!("m2")),
                    ("role", json!(line.role.as_str())),
                    ("video_pair", json!(out.video_pair)),
                    ("gunshot_index", json!(gunshot)),
                    ("estimate_id", json!(rec.id)),
                    ("two_a", r3(line.two_a)),
                    ("most_likely", json!(line.most_likely)),
                ]),
            )?);
        }
    }
    if let (Some(rec), Some(heat)) = (doc.latest(EstimateMethod::Fused, gunshot), heat) {
        for (rank, region) in heat.argmax_region.iter().enumerate() {
            features.push(formats::region_polygon(
                &heat.grid,
                region,
                props([
                    ("method", json!("fused")),
                    ("role", json!("argmax_region")),
                    ("rank", json!(rank + 1)),
                    ("peak", r3(region.peak)),
                    ("cells", json!(region.cells.len())),
                    ("gunshot_index", json!(gunshot)),
                    ("estimate_id", json!(rec.id)),
                ]),
            )?);
        }
        if let Some(best) = heat.argmax_region.first() {
            features.push(formats::point(
                &frame,
                &best.centroid,
                props([
                    ("method", json!("fused")),
                    ("role", json!("centroid")),
                    ("gunshot_index", json!(gunshot)),
                    ("estimate_id", json!(rec.id)),
                ]),
            )?);
        }
    }
    Ok(formats::feature_collection(features))
}

/// GeoJSON for the latest fused estimate of a gunshot, recomputed from the
/// stored records.
pub fn fused_geojson(store: &Store, collection: &str, gunshot: u32) -> Result<Value> {
    let doc = store.load(collection)?;
    let rec = doc
        .latest(EstimateMethod::Fused, gunshot)
        .ok_or_else(|| Error::NotFound(format!("fused estimate for gunshot {gunshot}")))?;
    let heat = load_heatmap(store, collection, rec)?;
    gunshot_geojson(&doc, gunshot, Some(&heat))
}

// ---- simulation ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateParams {
    pub seed: u64,
    pub cameras: usize,
    /// Slant camera-shooter distance, meters.
    pub distance: Interval,
    /// Camera angle off the trajectory, degrees.
    pub alpha_deg: Interval,
    /// Speed of sound, m/s.
    pub vs: Interval,
    /// Bullet speed over speed of sound.
    pub mach: Interval,
    /// Shooter height above the frame origin, meters.
    pub shooter_up: f64,
    /// Height of the ground the cameras stand on; `None` scatters them in 3D.
    pub ground_up: Option<f64>,
    /// Geographic position of the shooter's foot point.
    pub origin: GeoPoint,
    pub fps: f64,
    pub rate: u32,
    pub noise_db: f64,
    /// How long before the shot each recording starts, seconds.
    pub lead: Interval,
}

impl Default for SimulateParams {
    fn default() -> Self {
        SimulateParams {
            seed: 0,
            cameras: 3,
            distance: Interval::new(300.0, 900.0),
            alpha_deg: default_alpha(),
            vs: default_vs(),
            mach: Interval::new(1.2, 3.0),
            shooter_up: 100.0,
            ground_up: Some(0.0),
            origin: GeoPoint::new(36.0950, -115.1710),
            fps: 30.0,
            rate: 44_100,
            noise_db: -40.0,
            lead: Interval::new(0.5, 3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimVideo {
    pub camera: String,
    pub video_id: Option<String>,
    pub wav: String,
    pub position: GeoPoint,
    /// Recording start on the scene clock, seconds.
    pub start: f64,
    pub duration: f64,
    /// Frame showing the muzzle flash; light arrives instantly.
    pub flash_frame: u64,
    /// Arrivals in local video time, seconds.
    pub shock_local: Option<f64>,
    pub muzzle_local: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub params: SimulateParams,
    pub shooter: GeoPoint,
    pub collection_id: Option<String>,
    pub scene_file: String,
    pub videos: Vec<SimVideo>,
}

/// Oracle scene, one WAV per camera and, with a store, a collection holding
/// the videos and camera fixes.
pub fn simulate(
    params: &SimulateParams,
    out_dir: &Path,
    store: Option<&Store>,
) -> Result<(Simulation, Scene)> {
    if !(params.fps > 0.0 && params.lead.is_valid() && params.lead.min >= 0.0) {
        return Err(Error::validation(
            "fps must be > 0 and lead a valid non-negative range",
        ));
    }
    let constraints = SceneConstraints {
        distance: params.distance,
        alpha_deg: params.alpha_deg,
        vs: params.vs,
        mach: params.mach,
        cameras: params.cameras,
        require_shock: true,
        shooter_up: params.shooter_up,
        placement: params
            .ground_up
            .map_or(Placement::Free, |up| Placement::Ground { up }),
        fire_time: 0.0,
    };
    let scene = oracle::generate_random_scene(params.seed, &constraints)?;
    let report: ArrivalReport = oracle::report(&scene)?;
    let frame = LocalFrame::new(params.origin)?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed_1ead);

    let mut videos = Vec::new();
    for (k, (cam, arr)) in scene.cameras.iter().zip(&report.cameras).enumerate() {
        let lead = rng.random_range(params.lead.min..=params.lead.max);
        let start = scene.fire_time - lead;
        let muzzle_local = arr.muzzle_time - start;
        let duration = muzzle_local + 1.0;
        let opts = SynthOptions {
            rate: params.rate,
            noise_db: params.noise_db,
            start: Some(start),
            duration: Some(duration),
            seed: params.seed.wrapping_mul(1000).wrapping_add(k as u64),
        };
        let clip = oracle::synthesize_audio(&scene, &cam.id, &opts)?;
        let wav_path = out_dir.join(format!("{}.wav", cam.id));
        wav::write_wav(&wav_path, &clip)?;
        videos.push(SimVideo {
            camera: cam.id.clone(),
            video_id: None,
            wav: path_string(&wav_path),
            position: geo::from_enu(&frame, &cam.position)?,
            start,
            duration: clip.duration(),
            flash_frame: ((scene.fire_time - start) * params.fps).round() as u64,
            shock_local: arr.shock_time.map(|t| t - start),
            muzzle_local,
        });
    }
    let scene_file = out_dir.join("scene.json");
    std::fs::write(&scene_file, serde_json::to_vec_pretty(&scene)?)?;

    let mut collection_id = None;
    if let Some(store) = store {
        let doc = store.create_collection(&format!("simulated scene, seed {}", params.seed))?;
        for v in &mut videos {
            let rec = ingest(
                store,
                doc.id(),
                IngestRequest {
                    title: v.camera.clone(),
                    audio_path: Some(v.wav.clone()),
                    fps: params.fps,
                    duration: Some(v.duration),
                    notes: String::new(),
                    camera: Some(v.position),
                },
            )?;
            v.video_id = Some(rec.id);
        }
        collection_id = Some(doc.id().to_string());
    }
    let sim = Simulation {
        params: params.clone(),
        shooter: geo::from_enu(&frame, &scene.shooter)?,
        collection_id,
        scene_file: path_string(&scene_file),
        videos,
    };
    std::fs::write(
        out_dir.join("simulation.json"),
        serde_json::to_vec_pretty(&sim)?,
    )?;
    Ok((sim, scene))
}

fn path_string(p: &Path) -> String {
    let abs: PathBuf = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    abs.to_string_lossy().into_owned()
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let bytes = std::fs::read(path)?;
    let scene: Scene = serde_json::from_slice(&bytes)?;
    scene.validate()?;
    Ok(scene)
}

/// Markings straight from a simulation's oracle arrivals.
pub fn simulated_markings(sim: &Simulation, gunshot: u32) -> Vec<Marking> {
    sim.videos
        .iter()
        .filter_map(|v| {
            Some(Marking {
                video_id: v.video_id.clone()?,
                gunshot_index: gunshot,
                shock_time: v.shock_local,
                muzzle_time: v.muzzle_local,
                confirmed_by: ConfirmedBy::Assist,
            })
        })
        .collect()
}

/// Frame matches on the muzzle flash for every pair of simulated videos.
pub fn simulated_flash_matches(sim: &Simulation) -> Vec<ManualMatch> {
    let vids: Vec<_> = sim.videos.iter().filter(|v| v.video_id.is_some()).collect();
    let mut out = Vec::new();
    for i in 0..vids.len() {
        for j in i + 1..vids.len() {
            out.push(ManualMatch {
                video_i: vids[i].video_id.clone().unwrap_or_default(),
                frame_i: vids[i].flash_frame,
                video_j: vids[j].video_id.clone().unwrap_or_default(),
                frame_j: vids[j].flash_frame,
            });
        }
    }
    out
}

/// Canonical map of pairwise offsets, for display.
pub fn offsets_table(offsets: &[PairwiseOffset]) -> BTreeMap<String, f64> {
    offsets
        .iter()
        .map(|o| (format!("{}->{}", o.video_i, o.video_j), o.offset))
        .collect()
}
