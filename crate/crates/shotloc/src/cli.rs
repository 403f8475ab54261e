//! Command-line driver for every pipeline stage.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{ColorChoice, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde::Serialize;
use serde_json::json;
use shotloc_core::fusion::FuseMode;
use shotloc_core::geo::{EnuPoint, GeoPoint};
use shotloc_core::tdoa::CenterLine;
use shotloc_core::Interval;

use crate::error::{Error, Result};
use crate::formats;
use crate::pipeline::{
    self, FuseParams, IngestRequest, M1Params, M1Request, M2Params, M2Request, ManualMatch,
};
use crate::service::{self, ServeConfig};
use crate::store::{ConfirmedBy, Marking, Store};

pub const DEFAULT_DATA_DIR: &str = "shotloc-data";

/// `min:max`, or a single value for a fixed parameter.
pub fn parse_range(s: &str) -> std::result::Result<Interval, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| format!("`{t}` is not a number"))
    };
    let (lo, hi) = match s.split_once(':') {
        Some((a, b)) => (num(a)?, num(b)?),
        None => {
            let v = num(s)?;
            (v, v)
        }
    };
    let r = Interval::new(lo, hi);
    if !r.is_valid() {
        return Err(format!("`{s}` is not a range min:max with min <= max"));
    }
    Ok(r)
}

/// `east,north` or `east,north,up` in meters.
pub fn parse_enu(s: &str) -> std::result::Result<EnuPoint, String> {
    let parts = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{t}` is not a number"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match parts[..] {
        [e, n] => Ok(EnuPoint::new(e, n, 0.0)),
        [e, n, u] => Ok(EnuPoint::new(e, n, u)),
        _ => Err(format!("`{s}` is not east,north[,up]")),
    }
}

fn parse_frame_mark(s: &str) -> Result<(String, u64)> {
    let (video, frame) = s
        .rsplit_once(':')
        .ok_or_else(|| Error::validation(format!("`{s}` is not VIDEO:FRAME")))?;
    let frame = frame
        .parse()
        .map_err(|_| Error::validation(format!("`{frame}` is not a frame number")))?;
    Ok((video.to_string(), frame))
}

#[derive(Debug, Parser)]
#[command(
    name = "shotloc",
    version,
    about = "Locate a shooter from the sound in several video recordings"
)]
pub struct Cli {
    /// Directory holding collections and job results.
    #[arg(long, global = true, env = "SHOTLOC_DATA")]
    pub data_dir: Option<PathBuf>,
    /// JSON file with defaults for data_dir, listen, token and workers.
    #[arg(long, global = true, env = "SHOTLOC_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print errors to stderr as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Product,
    Sum,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CenterArg {
    Mean,
    Legacy,
}

#[derive(Debug, clap::Args)]
pub struct AudioSource {
    /// Registered video whose audio track is read.
    #[arg(long, conflicts_with = "wav", required_unless_present = "wav")]
    pub video: Option<String>,
    /// WAV file read directly.
    #[arg(long)]
    pub wav: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty collection.
    NewCollection {
        #[arg(long)]
        title: String,
    },
    /// Register a video and its WAV track in a collection.
    Ingest {
        /// Target collection; a new one is created when absent.
        #[arg(long)]
        collection: Option<String>,
        #[arg(long)]
        title: String,
        /// Audio track, 16-bit PCM or 32-bit float.
        #[arg(long, required_unless_present = "duration")]
        wav: Option<PathBuf>,
        /// Frame rate, frames/s.
        #[arg(long)]
        fps: f64,
        /// Length, seconds; read from the WAV when absent.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value = "")]
        notes: String,
        /// Camera latitude, degrees.
        #[arg(long, allow_hyphen_values = true, requires = "lon")]
        lat: Option<f64>,
        /// Camera longitude, degrees.
        #[arg(long, allow_hyphen_values = true, requires = "lat")]
        lon: Option<f64>,
        /// Camera elevation, meters.
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        elev: f64,
    },
    /// Set the camera position of a video.
    CameraFix {
        #[arg(long)]
        video: String,
        /// Latitude, degrees.
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        /// Longitude, degrees.
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        /// Elevation, meters.
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        elev: f64,
    },
    /// Write a spectrogram grid dump.
    Spectrogram {
        #[command(flatten)]
        source: AudioSource,
        /// Window length, samples (power of two).
        #[arg(long, default_value_t = 1024)]
        window: usize,
        /// Hop, samples.
        #[arg(long, default_value_t = 256)]
        hop: usize,
        /// Output grid dump.
        #[arg(long)]
        out: PathBuf,
    },
    /// List candidate gunshot sounds.
    Detect {
        #[command(flatten)]
        source: AudioSource,
        /// Onset threshold, dB over the background.
        #[arg(long, default_value_t = 12.0)]
        ratio_db: f64,
        /// Minimum separation between candidates, ms.
        #[arg(long, default_value_t = 50.0)]
        min_sep_ms: f64,
    },
    /// Estimate pairwise offsets and the global timeline.
    Sync {
        #[arg(long)]
        collection: String,
        /// Two frames showing the same event, e.g. `c1-v1:120 c1-v2:87`.
        #[arg(long, num_args = 2, value_names = ["VIDEO:FRAME", "VIDEO:FRAME"], action = clap::ArgAction::Append)]
        manual: Vec<String>,
        /// Skip audio correlation.
        #[arg(long)]
        no_audio: bool,
        /// Largest offset searched, seconds.
        #[arg(long, default_value_t = 30.0)]
        max_lag: f64,
        /// Video pinned at global time zero.
        #[arg(long)]
        anchor: Option<String>,
    },
    /// Set shockwave and muzzle blast times of one gunshot in one video.
    Mark {
        #[arg(long)]
        video: String,
        /// 1-based gunshot number.
        #[arg(long, default_value_t = 1)]
        gunshot: u32,
        /// Shockwave arrival, seconds into the video.
        #[arg(long)]
        shock: Option<f64>,
        /// Muzzle blast arrival, seconds into the video.
        #[arg(long)]
        muzzle: f64,
        #[arg(long)]
        expected_version: Option<u64>,
    },
    /// Shooter distance from shockwave-muzzle delay at one camera.
    EstimateM1 {
        /// Muzzle minus shockwave arrival, seconds; runs without a collection.
        #[arg(long, conflicts_with_all = ["collection", "video"])]
        t_diff: Option<f64>,
        #[arg(long, requires = "video")]
        collection: Option<String>,
        #[arg(long, requires = "collection")]
        video: Option<String>,
        #[arg(long, default_value_t = 1)]
        gunshot: u32,
        /// Speed of sound, m/s, as min:max.
        #[arg(long, value_parser = parse_range, default_value = "331.3:346")]
        vs: Interval,
        /// Bullet speed, m/s, as min:max.
        #[arg(long, value_parser = parse_range)]
        vb: Interval,
        /// Camera angle off the trajectory, degrees, as min:max.
        #[arg(long, value_parser = parse_range, default_value = "0:15")]
        alpha: Interval,
        /// Shooter elevation above the camera, meters.
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        de: f64,
        /// Monte Carlo samples.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Hyperbola band from muzzle arrival times at two cameras.
    EstimateM2 {
        /// Camera A, meters east,north[,up]; runs without a collection.
        #[arg(long, value_parser = parse_enu, allow_hyphen_values = true, requires_all = ["cam_b", "t_diff"], conflicts_with = "collection")]
        cam_a: Option<EnuPoint>,
        /// Camera B, meters east,north[,up].
        #[arg(long, value_parser = parse_enu, allow_hyphen_values = true)]
        cam_b: Option<EnuPoint>,
        /// Arrival at B minus arrival at A, seconds.
        #[arg(long, allow_hyphen_values = true)]
        t_diff: Option<f64>,
        #[arg(long, requires_all = ["video_a", "video_b"])]
        collection: Option<String>,
        #[arg(long)]
        video_a: Option<String>,
        #[arg(long)]
        video_b: Option<String>,
        #[arg(long, default_value_t = 1)]
        gunshot: u32,
        /// Speed of sound, m/s, as min:max.
        #[arg(long, value_parser = parse_range, default_value = "331.3:346")]
        vs: Interval,
        /// Timing tolerance, seconds.
        #[arg(long, default_value_t = 0.033)]
        epsilon: f64,
        #[arg(long, value_enum, default_value = "mean")]
        center_line: CenterArg,
        /// Half-length of each hyperbola arm, meters.
        #[arg(long, default_value_t = 2000.0)]
        extent: f64,
        /// Polyline vertex spacing, meters.
        #[arg(long, default_value_t = 2.0)]
        step: f64,
    },
    /// Fuse the latest estimates of a gunshot into a heatmap.
    Fuse {
        #[arg(long)]
        collection: String,
        #[arg(long, default_value_t = 1)]
        gunshot: u32,
        /// Cell size, meters.
        #[arg(long, default_value_t = 5.0)]
        cell: f64,
        /// Padding around the cameras without a ring estimate, meters.
        #[arg(long, default_value_t = 1000.0)]
        margin: f64,
        #[arg(long, value_enum, default_value = "product")]
        mode: ModeArg,
        /// Source height in the local frame, meters.
        #[arg(long, allow_hyphen_values = true)]
        plane_up: Option<f64>,
        /// Region threshold as a fraction of the peak.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// GeoJSON destination instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Copy of the heatmap grid dump.
        #[arg(long)]
        grid_out: Option<PathBuf>,
    },
    /// Generate a synthetic scene, its WAV tracks and a collection.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        cameras: usize,
        /// Camera-shooter distance, meters, as min:max.
        #[arg(long, value_parser = parse_range, default_value = "300:900")]
        distance: Interval,
        /// Camera angle off the trajectory, degrees, as min:max.
        #[arg(long, value_parser = parse_range, default_value = "0:15")]
        alpha: Interval,
        /// Speed of sound, m/s, as min:max.
        #[arg(long, value_parser = parse_range, default_value = "331.3:346")]
        vs: Interval,
        /// Bullet speed over speed of sound, as min:max.
        #[arg(long, value_parser = parse_range, default_value = "1.2:3")]
        mach: Interval,
        /// Shooter height above the cameras' ground, meters.
        #[arg(long, allow_hyphen_values = true, default_value_t = 100.0)]
        shooter_up: f64,
        /// Scatter cameras in 3D instead of on the ground.
        #[arg(long)]
        free: bool,
        /// Latitude of the shooter's foot point, degrees.
        #[arg(long, allow_hyphen_values = true, default_value_t = 36.095)]
        lat: f64,
        /// Longitude of the shooter's foot point, degrees.
        #[arg(long, allow_hyphen_values = true, default_value_t = -115.171)]
        lon: f64,
        /// Video frame rate, frames/s.
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Audio sample rate, Hz.
        #[arg(long, default_value_t = 44_100)]
        rate: u32,
        /// Noise level, dB full scale.
        #[arg(long, allow_hyphen_values = true, default_value_t = -40.0)]
        noise_db: f64,
        /// Recording start before the shot, seconds, as min:max.
        #[arg(long, value_parser = parse_range, default_value = "0.5:3")]
        lead: Interval,
        /// Directory for WAV files and the scene; defaults to the data directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only write files, without creating a collection.
        #[arg(long)]
        no_collection: bool,
    },
    /// Write a collection and its artifacts to a zip archive.
    Export {
        #[arg(long)]
        collection: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore a collection from a zip archive.
    Import { archive: PathBuf },
    /// Serve the HTTP API.
    Serve {
        /// Address and port.
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// Bearer token required on every request.
        #[arg(long, env = "SHOTLOC_TOKEN", hide_env_values = true)]
        token: Option<String>,
        /// Compute worker threads.
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    data_dir: Option<PathBuf>,
    listen: Option<SocketAddr>,
    token: Option<String>,
    workers: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let bytes = std::fs::read(p)?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::validation(format!("config {}: {e}", p.display())))
        }
    }
}

fn emit(out: &mut dyn Write, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    out.write_all(&bytes)?;
    Ok(())
}

fn load_source(store: &Store, src: &AudioSource) -> Result<shotloc_core::audio::AudioClip> {
    match (&src.video, &src.wav) {
        (Some(v), _) => pipeline::video_clip(store, v),
        (None, Some(p)) => crate::wav::load_wav(p),
        (None, None) => Err(Error::validation("either --video or --wav is required")),
    }
}

struct Ctx {
    data_dir: PathBuf,
    config: ConfigFile,
}

impl Ctx {
    fn store(&self) -> Result<Store> {
        Store::open(&self.data_dir)
    }
}

fn dispatch(cmd: Command, ctx: Ctx, out: &mut dyn Write) -> Result<()> {
    let mut quiet = |_: f64| {};
    match cmd {
        Command::NewCollection { title } => emit(out, &ctx.store()?.create_collection(&title)?),
        Command::Ingest {
            collection,
            title,
            wav,
            fps,
            duration,
            notes,
            lat,
            lon,
            elev,
        } => {
            let store = ctx.store()?;
            let collection = match collection {
                Some(c) => c,
                None => store.create_collection(&title)?.id().to_string(),
            };
            let camera = lat
                .zip(lon)
                .map(|(lat, lon)| GeoPoint::with_elev(lat, lon, elev));
            let req = IngestRequest {
                title,
                audio_path: wav.map(|w| w.to_string_lossy().into_owned()),
                fps,
                duration,
                notes,
                camera,
            };
            let video = pipeline::ingest(&store, &collection, req)?;
            emit(out, &json!({ "collection_id": collection, "video": video }))
        }
        Command::CameraFix {
            video,
            lat,
            lon,
            elev,
        } => {
            let fix = crate::store::CameraFix {
                video_id: video,
                position: GeoPoint::with_elev(lat, lon, elev),
                valid_at: 0.0,
            };
            let version = ctx.store()?.set_camera_fix(fix, None)?;
            emit(out, &json!({ "version": version }))
        }
        Command::Spectrogram {
            source,
            window,
            hop,
            out: path,
        } => {
            let clip = load_source(&ctx.store()?, &source)?;
            let s = pipeline::spectrogram(&clip, window, hop)?;
            let dump = formats::spectrogram_dump(&s);
            crate::store::write_atomic(&path, dump.to_text().as_bytes())?;
            emit(
                out,
                &json!({
                    "file": path.to_string_lossy(),
                    "frames": s.frames(),
                    "bins": s.bins(),
                    "frame_step_s": hop as f64 / s.rate as f64,
                    "bin_step_hz": s.rate as f64 / window as f64,
                }),
            )
        }
        Command::Detect {
            source,
            ratio_db,
            min_sep_ms,
        } => {
            let clip = load_source(&ctx.store()?, &source)?;
            emit(out, &pipeline::detect(&clip, ratio_db, min_sep_ms)?)
        }
        Command::Sync {
            collection,
            manual,
            no_audio,
            max_lag,
            anchor,
        } => {
            let manual = manual
                .chunks(2)
                .map(|pair| {
                    let (video_i, frame_i) = parse_frame_mark(&pair[0])?;
                    let (video_j, frame_j) = parse_frame_mark(&pair[1])?;
                    Ok(ManualMatch {
                        video_i,
                        frame_i,
                        video_j,
                        frame_j,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let params = pipeline::SyncParams {
                audio: !no_audio,
                max_lag,
                manual,
                anchor,
            };
            emit(
                out,
                &pipeline::sync(&ctx.store()?, &collection, &params, &mut quiet)?,
            )
        }
        Command::Mark {
            video,
            gunshot,
            shock,
            muzzle,
            expected_version,
        } => {
            let m = Marking {
                video_id: video,
                gunshot_index: gunshot,
                shock_time: shock,
                muzzle_time: muzzle,
                confirmed_by: ConfirmedBy::Human,
            };
            let version = pipeline::mark(&ctx.store()?, m, expected_version)?;
            emit(out, &json!({ "version": version }))
        }
        Command::EstimateM1 {
            t_diff,
            collection,
            video,
            gunshot,
            vs,
            vb,
            alpha,
            de,
            samples,
            seed,
        } => {
            let params = M1Params {
                vs,
                vb,
                alpha_deg: alpha,
                shooter_elev: de,
                samples,
                seed,
            };
            match (t_diff, collection, video) {
                (Some(t), _, _) => emit(out, &pipeline::m1_standalone(t, &params, &mut quiet)?),
                (None, Some(c), Some(v)) => {
                    let req = M1Request {
                        video_id: v,
                        gunshot,
                        params,
                    };
                    emit(
                        out,
                        &pipeline::estimate_m1(&ctx.store()?, &c, &req, &mut quiet)?,
                    )
                }
                _ => Err(Error::validation(
                    "give --t-diff, or --collection with --video",
                )),
            }
        }
        Command::EstimateM2 {
            cam_a,
            cam_b,
            t_diff,
            collection,
            video_a,
            video_b,
            gunshot,
            vs,
            epsilon,
            center_line,
            extent,
            step,
        } => {
            let params = M2Params {
                vs,
                sync_epsilon: epsilon,
                center_line: match center_line {
                    CenterArg::Mean => CenterLine::Mean,
                    CenterArg::Legacy => CenterLine::Legacy,
                },
                extent,
                step,
            };
            match (cam_a, cam_b, t_diff, collection, video_a, video_b) {
                (Some(a), Some(b), Some(t), _, _, _) => {
                    let (band, geometry) = pipeline::m2_standalone(a, 0.0, b, t, &params)?;
                    emit(
                        out,
                        &json!({ "band": band, "lines": geometry.lines, "warnings": geometry.warnings }),
                    )
                }
                (_, _, _, Some(c), Some(va), Some(vb)) => {
                    let req = M2Request {
                        video_a: va,
                        video_b: vb,
                        gunshot,
                        params,
                    };
                    emit(out, &pipeline::estimate_m2(&ctx.store()?, &c, &req)?)
                }
                _ => Err(Error::validation(
                    "give --cam-a, --cam-b and --t-diff, or --collection with two videos",
                )),
            }
        }
        Command::Fuse {
            collection,
            gunshot,
            cell,
            margin,
            mode,
            plane_up,
            threshold,
            out: path,
            grid_out,
        } => {
            let store = ctx.store()?;
            let params = FuseParams {
                cell,
                margin,
                mode: match mode {
                    ModeArg::Product => FuseMode::Product,
                    ModeArg::Sum => FuseMode::Sum,
                },
                plane_up,
                threshold,
            };
            let rec = pipeline::fuse(&store, &collection, gunshot, &params, &mut quiet)?;
            let fused: pipeline::FuseOutput = serde_json::from_value(rec.outputs.clone())?;
            let geojson = std::fs::read(store.artifact_path(&collection, &fused.geojson_file))?;
            if let Some(g) = grid_out {
                std::fs::copy(store.artifact_path(&collection, &fused.grid_file), g)?;
            }
            match path {
                Some(p) => {
                    crate::store::write_atomic(&p, &geojson)?;
                    emit(out, &rec)
                }
                None => Ok(out.write_all(&geojson)?),
            }
        }
        Command::Simulate {
            seed,
            cameras,
            distance,
            alpha,
            vs,
            mach,
            shooter_up,
            free,
            lat,
            lon,
            fps,
            rate,
            noise_db,
            lead,
            out: dir,
            no_collection,
        } => {
            let params = pipeline::SimulateParams {
                seed,
                cameras,
                distance,
                alpha_deg: alpha,
                vs,
                mach,
                shooter_up,
                ground_up: if free { None } else { Some(0.0) },
                origin: GeoPoint::new(lat, lon),
                fps,
                rate,
                noise_db,
                lead,
            };
            let dir = dir.unwrap_or_else(|| {
                ctx.data_dir
                    .join("simulations")
                    .join(format!("seed-{seed}"))
            });
            let store = if no_collection {
                None
            } else {
                Some(ctx.store()?)
            };
            let (sim, _) = pipeline::simulate(&params, &dir, store.as_ref())?;
            emit(out, &sim)
        }
        Command::Export {
            collection,
            out: path,
        } => {
            let store = ctx.store()?;
            let tmp = path.with_extension("zip.partial");
            let file = std::fs::File::create(&tmp)?;
            store.export_collection(&collection, std::io::BufWriter::new(file))?;
            std::fs::rename(&tmp, &path)?;
            emit(out, &json!({ "file": path.to_string_lossy() }))
        }
        Command::Import { archive } => {
            let file = std::fs::File::open(&archive)?;
            let id = ctx
                .store()?
                .import_collection(std::io::BufReader::new(file))?;
            emit(out, &json!({ "collection_id": id }))
        }
        Command::Serve {
            listen,
            token,
            workers,
        } => {
            let cfg = ServeConfig {
                listen: listen
                    .or(ctx.config.listen)
                    .unwrap_or_else(|| "127.0.0.1:8080".parse().expect("literal")),
                data_dir: ctx.data_dir.clone(),
                token: token.or(ctx.config.token).ok_or_else(|| {
                    Error::validation("a token is required (--token or SHOTLOC_TOKEN)")
                })?,
                workers: workers.or(ctx.config.workers).unwrap_or(2),
            };
            service::serve(cfg, |addr| {
                let _ = writeln!(out, "{}", json!({ "listening": addr.to_string() }));
                let _ = out.flush();
            })
        }
    }
}

fn report(err: &Error, json_errors: bool, stderr: &mut dyn Write) -> i32 {
    if json_errors {
        let _ = writeln!(
            stderr,
            "{}",
            serde_json::to_string(&err.body()).unwrap_or_default()
        );
    } else {
        let _ = writeln!(stderr, "error: {err}");
    }
    err.exit_code()
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let json_errors = argv.iter().any(|a| a == "--json");
    let color = if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        ColorChoice::Never
    } else {
        ColorChoice::Auto
    };
    let cmd = <Cli as clap::CommandFactory>::command().color(color);
    let matches = match cmd.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let err = Error::validation(e.render().to_string().trim().to_string());
            return report(&err, json_errors, stderr);
        }
    };
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return report(&Error::validation(e.to_string()), json_errors, stderr),
    };
    let result = load_config(cli.config.as_deref()).and_then(|config| {
        let data_dir = cli
            .data_dir
            .clone()
            .or(config.data_dir.clone())
            .unwrap_or_else(|| DEFAULT_DATA_DIR.into());
        dispatch(cli.command, Ctx { data_dir, config }, stdout)
    });
    match result {
        Ok(()) => {
            let _ = stdout.flush();
            0
        }
        Err(e) => report(&e, json_errors, stderr),
    }
}
