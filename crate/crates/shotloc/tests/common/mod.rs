#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use shotloc::jobs::{result_path, JobKind, JobQueue, JobStatus};
use shotloc::pipeline::{self, SimulateParams, Simulation};
use shotloc::store::{EstimateMethod, Store};
use shotloc_core::geo::{self, GeoPoint, LocalFrame};

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.stdout)
            .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", self.stdout))
    }
}

pub fn cli<S: AsRef<str>>(args: &[S]) -> Output {
    let mut argv = vec!["shotloc".to_string()];
    argv.extend(args.iter().map(|a| a.as_ref().to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = shotloc::cli::run(argv, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

/// Runs a CLI command that must succeed and returns its JSON output.
pub fn cli_ok<S: AsRef<str>>(args: &[S]) -> Value {
    let out = cli(args);
    let shown: Vec<&str> = args.iter().map(|a| a.as_ref()).collect();
    assert_eq!(out.code, 0, "{shown:?} failed: {}", out.stderr);
    out.json()
}

pub fn data_arg(dir: &Path) -> Vec<String> {
    vec!["--data-dir".into(), dir.to_string_lossy().into_owned()]
}

pub struct PipelineRun {
    pub sim: Simulation,
    pub geojson: String,
}

/// `simulate → sync → mark → m1 ×n → m2 ×pairs → fuse` through the CLI,
/// with `seed` for every randomized step.
pub fn cli_pipeline(dir: &Path, seed: u64) -> PipelineRun {
    let data = data_arg(&dir.join("data"));
    let with = |rest: &[String]| -> Vec<String> { data.iter().chain(rest).cloned().collect() };
    let s = |x: &str| x.to_string();

    let sim_dir = dir.join("sim").to_string_lossy().into_owned();
    let sim: Simulation = serde_json::from_value(cli_ok(&with(&[
        s("simulate"),
        s("--seed"),
        seed.to_string(),
        s("--cameras"),
        s("3"),
        s("--out"),
        sim_dir,
    ])))
    .unwrap();
    let scene = pipeline::read_scene(&sim.scene_file).unwrap();
    let c = sim.collection_id.clone().unwrap();

    let mut sync = vec![s("sync"), s("--collection"), c.clone()];
    for m in pipeline::simulated_flash_matches(&sim) {
        sync.extend([
            s("--manual"),
            format!("{}:{}", m.video_i, m.frame_i),
            format!("{}:{}", m.video_j, m.frame_j),
        ]);
    }
    cli_ok(&with(&sync));

    let de = sim.params.shooter_up - sim.params.ground_up.unwrap_or(0.0);
    let vb = format!("{}:{}", scene.vb * 0.9, scene.vb * 1.1);
    for v in &sim.videos {
        let id = v.video_id.clone().unwrap();
        let mut mark = vec![
            s("mark"),
            s("--video"),
            id.clone(),
            s("--muzzle"),
            v.muzzle_local.to_string(),
        ];
        if let Some(t) = v.shock_local {
            mark.extend([s("--shock"), t.to_string()]);
        }
        cli_ok(&with(&mark));
        cli_ok(&with(&[
            s("estimate-m1"),
            s("--collection"),
            c.clone(),
            s("--video"),
            id,
            s("--vb"),
            vb.clone(),
            s("--de"),
            de.to_string(),
            s("--seed"),
            seed.to_string(),
        ]));
    }
    let ids: Vec<String> = sim
        .videos
        .iter()
        .map(|v| v.video_id.clone().unwrap())
        .collect();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            cli_ok(&with(&[
                s("estimate-m2"),
                s("--collection"),
                c.clone(),
                s("--video-a"),
                ids[i].clone(),
                s("--video-b"),
                ids[j].clone(),
            ]));
        }
    }
    let out = cli(&with(&[s("fuse"), s("--collection"), c]));
    assert_eq!(out.code, 0, "fuse failed: {}", out.stderr);
    PipelineRun {
        sim,
        geojson: out.stdout,
    }
}

/// Horizontal distance from the fused centroid in a GeoJSON document to a
/// geographic point.
pub fn centroid_error(geojson: &Value, truth: &GeoPoint) -> f64 {
    let centroid = geojson["features"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["properties"]["role"] == "centroid")
        .expect("centroid feature");
    let c = &centroid["geometry"]["coordinates"];
    let p = GeoPoint::new(c[1].as_f64().unwrap(), c[0].as_f64().unwrap());
    let frame = LocalFrame::new(*truth).unwrap();
    let e = geo::to_enu(&frame, &p).unwrap();
    e.east.hypot(e.north)
}

pub const CRASH_ENV: &str = "SHOTLOC_CRASH_WRITER_DIR";

/// Body of the child process in the crash test: writes until killed.
pub fn crash_writer(dir: &Path) {
    let store = Store::open(dir).unwrap();
    if store.load("c1").is_err() {
        store.create_collection("crash").unwrap();
    }
    let payload = "x".repeat(64 * 1024);
    let start = store.load("c1").unwrap().estimates.len() as u64;
    for i in start.. {
        let body = format!("{i}\n{payload}\n{i}\n");
        store
            .write_artifact("c1", "blob.txt", body.as_bytes())
            .unwrap();
        store
            .add_estimate(
                "c1",
                1,
                EstimateMethod::M1,
                json!({ "i": i, "pad": payload }),
                json!({}),
            )
            .unwrap();
    }
}

pub fn check_no_partial_files(root: &Path) {
    let store = Store::open(root).unwrap();
    let doc = store.load("c1").unwrap();
    for (k, e) in doc.estimates.iter().enumerate() {
        assert_eq!(e.inputs["i"], k as u64);
    }
    let blob = std::fs::read_to_string(store.artifact_path("c1", "blob.txt")).unwrap_or_default();
    if !blob.is_empty() {
        let lines: Vec<&str> = blob.lines().collect();
        assert_eq!(lines.len(), 3, "artifact was torn");
        assert_eq!(lines[0], lines[2]);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap().flatten() {
            if e.file_type().unwrap().is_dir() {
                stack.push(e.path());
            } else {
                assert!(
                    !e.file_name().to_string_lossy().contains(".tmp-"),
                    "leftover {}",
                    e.path().display()
                );
            }
        }
    }
}

/// Starts the test named `writer` of the current test binary against `dir`,
/// kills it mid-write `rounds` times and checks the store after each kill.
pub fn kill_writer_rounds(dir: &Path, writer: &str, rounds: u64) {
    let exe = std::env::current_exe().unwrap();
    for round in 0..rounds {
        let mut child = Command::new(&exe)
            .args(["--exact", writer, "--nocapture", "--test-threads=1"])
            .env(CRASH_ENV, dir)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        std::thread::sleep(Duration::from_millis(150 + 70 * round));
        child.kill().unwrap();
        child.wait().unwrap();
        check_no_partial_files(dir);
    }
    assert!(!Store::open(dir)
        .unwrap()
        .load("c1")
        .unwrap()
        .estimates
        .is_empty());
}

/// Simulated collection with oracle markings for gunshot 1; also returns the
/// true bullet speed.
pub fn simulated_store(dir: &Path, seed: u64) -> (Arc<Store>, Simulation, f64) {
    let store = Arc::new(Store::open(dir.join("data")).unwrap());
    let params = SimulateParams {
        seed,
        ..SimulateParams::default()
    };
    let (sim, scene) = pipeline::simulate(&params, &dir.join("sim"), Some(&store)).unwrap();
    for m in pipeline::simulated_markings(&sim, 1) {
        store.set_marking(m, None).unwrap();
    }
    (store, sim, scene.vb)
}

pub fn m1_body(video: &str, vb: f64, seed: u64) -> Value {
    json!({ "video_id": video, "gunshot": 1, "vb": { "min": vb * 0.9, "max": vb * 1.1 }, "shooter_elev": 100.0, "seed": seed, "samples": 20000 })
}

/// Ten distinct m1 jobs on two workers: each runs once, progress never goes
/// back and a job is done only after its result is stored.
pub fn ten_job_stress(dir: &Path) {
    let (store, sim, vb) = simulated_store(dir, 5);
    let c = sim.collection_id.clone().unwrap();
    let video = sim.videos[0].video_id.clone().unwrap();
    let queue = JobQueue::new(store.clone(), 2).unwrap();

    let ids: Vec<String> = (0..10)
        .map(|seed| {
            queue
                .submit(&c, JobKind::EstimateM1, m1_body(&video, vb, seed))
                .unwrap()
                .id
        })
        .collect();
    let mut distinct = ids.clone();
    distinct.sort();
    distinct.dedup();
    assert_eq!(distinct.len(), 10);
    // Resubmitting while they run changes nothing.
    for (seed, id) in ids.iter().enumerate() {
        assert_eq!(
            &queue
                .submit(&c, JobKind::EstimateM1, m1_body(&video, vb, seed as u64))
                .unwrap()
                .id,
            id
        );
    }

    let mut last: BTreeMap<String, f64> = BTreeMap::new();
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let mut all_done = true;
        for id in &ids {
            let v = queue.get(id).unwrap();
            let prev = last.insert(id.clone(), v.progress).unwrap_or(0.0);
            assert!(
                v.progress >= prev,
                "progress of {id} went back from {prev} to {}",
                v.progress
            );
            assert!((0.0..=1.0).contains(&v.progress));
            match v.status {
                JobStatus::Done => {
                    assert!(
                        result_path(&store, id).exists(),
                        "{id} done before its result was stored"
                    );
                    assert_eq!(v.progress, 1.0);
                }
                JobStatus::Error => panic!("{id} failed: {:?}", v.error),
                _ => all_done = false,
            }
        }
        if all_done {
            break;
        }
        assert!(Instant::now() < deadline, "jobs did not finish");
        std::thread::sleep(Duration::from_millis(2));
    }
    for id in &ids {
        let v = queue.get(id).unwrap();
        assert_eq!(v.runs, 1, "{id} ran {} times", v.runs);
        assert_eq!(queue.result(id).unwrap()["method"], "m1");
    }
    assert_eq!(store.load(&c).unwrap().estimates.len(), 10);
}
