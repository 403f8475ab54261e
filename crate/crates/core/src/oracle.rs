//! Forward acoustic simulator used as ground truth.
//!
//! The shockwave arrival is found as a first-arrival problem: sound leaving
//! the bullet at distance `s` downrange reaches the camera at
//! `f(s) = s / vb + |shooter + s * dir - cam| / vs`. `f` is convex in `s`, so
//! a golden-section search finds the earliest arrival. This formulation shares
//! no algebra with the inverse solver in [`crate::ballistics`].

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, AudioError};
use crate::geo::EnuPoint;
use crate::interval::Interval;

pub const MAX_REJECTIONS: usize = 10_000;
/// Minimizers closer than this to the muzzle (meters) count as "no shock".
pub const DOWNRANGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("bullet speed {vb} m/s is not supersonic for vs = {vs} m/s")]
    Subsonic { vs: f64, vb: f64 },
    #[error("no camera with id {0}")]
    UnknownCamera(String),
    #[error("scene constraints unsatisfiable after {0} rejections")]
    ConstraintUnsatisfiable(usize),
    #[error("invalid scene: {0}")]
    InvalidScene(&'static str),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Bullet direction: azimuth clockwise from north, inclination above the
/// horizon, both degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub azimuth_deg: f64,
    pub inclination_deg: f64,
}

impl Trajectory {
    pub fn unit(&self) -> [f64; 3] {
        let (az, inc) = (
            self.azimuth_deg.to_radians(),
            self.inclination_deg.to_radians(),
        );
        [az.sin() * inc.cos(), az.cos() * inc.cos(), inc.sin()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCamera {
    pub id: String,
    pub position: EnuPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shooter: EnuPoint,
    pub trajectory: Trajectory,
    /// Bullet speed, m/s.
    pub vb: f64,
    /// Speed of sound, m/s.
    pub vs: f64,
    pub cameras: Vec<SceneCamera>,
    /// Global time of the shot, seconds.
    #[serde(default)]
    pub fire_time: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.vs > 0.0 && self.vs.is_finite() && self.vb.is_finite()) {
            return Err(OracleError::InvalidScene(
                "speeds must be finite and positive",
            ));
        }
        if !self.shooter.is_finite() || self.cameras.iter().any(|c| !c.position.is_finite()) {
            return Err(OracleError::InvalidScene("non-finite position"));
        }
        Ok(())
    }

    pub fn camera(&self, id: &str) -> Result<&SceneCamera, OracleError> {
        self.cameras
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| OracleError::UnknownCamera(id.into()))
    }
}

fn sub(a: &EnuPoint, b: &EnuPoint) -> [f64; 3] {
    [a.east - b.east, a.north - b.north, a.up - b.up]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn muzzle_arrival(scene: &Scene, cam: &EnuPoint) -> f64 {
    scene.fire_time + scene.shooter.distance(cam) / scene.vs
}

/// Earliest shockwave arrival, or `None` when the camera is not downrange of
/// the muzzle.
pub fn shock_arrival(scene: &Scene, cam: &EnuPoint) -> Result<Option<f64>, OracleError> {
    if scene.vb <= scene.vs {
        return Err(OracleError::Subsonic {
            vs: scene.vs,
            vb: scene.vb,
        });
    }
    let dir = scene.trajectory.unit();
    let rel = sub(cam, &scene.shooter);
    let along = dot(rel, dir);
    let path = |s: f64| {
        let d = [
            rel[0] - s * dir[0],
            rel[1] - s * dir[1],
            rel[2] - s * dir[2],
        ];
        s / scene.vb + dot(d, d).sqrt() / scene.vs
    };
    if along <= 0.0 {
        return Ok(None);
    }
    // For s > along the path time only grows, so the minimizer is in [0, along].
    let (s_star, f_star) = golden_section(path, 0.0, along);
    if s_star <= DOWNRANGE_EPS {
        return Ok(None);
    }
    Ok(Some(scene.fire_time + f_star.min(path(0.0))))
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Minimizer of a convex function on `[lo, hi]`, to an absolute bracket width
/// of 1e-10 (or the floating-point limit).
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..400 {
        if hi - lo <= 1e-10 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let candidates = [(lo, f(lo)), (x1, f1), (x2, f2), (hi, f(hi))];
    candidates.into_iter().fold(
        (lo, f64::INFINITY),
        |best, c| if c.1 < best.1 { c } else { best },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraArrival {
    pub id: String,
    pub muzzle_time: f64,
    pub shock_time: Option<f64>,
    /// `muzzle_time - shock_time`.
    pub t_diff: Option<f64>,
    /// Angle between shooter->camera and the trajectory, radians.
    pub alpha: f64,
    /// Slant camera-shooter distance, meters.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalReport {
    pub cameras: Vec<CameraArrival>,
}

impl ArrivalReport {
    pub fn camera(&self, id: &str) -> Option<&CameraArrival> {
        self.cameras.iter().find(|c| c.id == id)
    }
}

pub fn arrival_at(scene: &Scene, cam: &SceneCamera) -> Result<CameraArrival, OracleError> {
    let muzzle_time = muzzle_arrival(scene, &cam.position);
    let shock_time = shock_arrival(scene, &cam.position)?;
    let rel = sub(&cam.position, &scene.shooter);
    let distance = dot(rel, rel).sqrt();
    let alpha = if distance > 0.0 {
        (dot(rel, scene.trajectory.unit()) / distance)
            .clamp(-1.0, 1.0)
            .acos()
    } else {
        0.0
    };
    Ok(CameraArrival {
        id: cam.id.clone(),
        muzzle_time,
        shock_time,
        t_diff: shock_time.map(|s| muzzle_time - s),
        alpha,
        distance,
    })
}

pub fn report(scene: &Scene) -> Result<ArrivalReport, OracleError> {
    scene.validate()?;
    let cameras = scene
        .cameras
        .iter()
        .map(|c| arrival_at(scene, c))
        .collect::<Result<_, _>>()?;
    Ok(ArrivalReport { cameras })
}

/// Camera placement for [`generate_random_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Placement {
    /// Anywhere in space around the trajectory.
    Free,
    /// On a horizontal plane at height `up`; the trajectory is aimed at the
    /// middle of the distance range on that plane.
    Ground { up: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConstraints {
    /// Slant camera-shooter distance, meters.
    pub distance: Interval,
    /// Camera angle off the trajectory, degrees.
    pub alpha_deg: Interval,
    /// Speed of sound, m/s.
    pub vs: Interval,
    /// Bullet speed as a multiple of the speed of sound.
    pub mach: Interval,
    pub cameras: usize,
    pub require_shock: bool,
    pub shooter_up: f64,
    pub placement: Placement,
    pub fire_time: f64,
}

impl Default for SceneConstraints {
    fn default() -> Self {
        SceneConstraints {
            distance: Interval::new(50.0, 2000.0),
            alpha_deg: Interval::new(0.0, 15.0),
            vs: Interval::new(331.3, 346.0),
            mach: Interval::new(1.2, 3.0),
            cameras: 3,
            require_shock: true,
            shooter_up: 0.0,
            placement: Placement::Free,
            fire_time: 0.0,
        }
    }
}

impl SceneConstraints {
    fn validate(&self) -> Result<(), OracleError> {
        let ok = self.distance.is_valid()
            && self.distance.min >= 0.0
            && self.alpha_deg.is_valid()
            && self.alpha_deg.min >= 0.0
            && self.alpha_deg.max <= 180.0
            && self.vs.is_valid()
            && self.vs.min > 0.0
            && self.mach.is_valid()
            && self.mach.min > 0.0
            && self.cameras >= 1
            && self.shooter_up.is_finite()
            && self.fire_time.is_finite();
        if ok {
            Ok(())
        } else {
            Err(OracleError::InvalidScene("invalid constraint ranges"))
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, r: Interval) -> f64 {
    rng.random_range(r.min..=r.max)
}

/// Deterministic random scene. Each camera is rejection-sampled until it
/// satisfies the distance and angle constraints (and hears a shockwave when
/// required); more than [`MAX_REJECTIONS`] rejections in total is an error.
pub fn generate_random_scene(seed: u64, c: &SceneConstraints) -> Result<Scene, OracleError> {
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vs = sample(&mut rng, c.vs);
    let vb = vs * sample(&mut rng, c.mach);
    let shooter = EnuPoint::new(0.0, 0.0, c.shooter_up);
    let azimuth_deg = rng.random_range(0.0..360.0);
    let inclination_deg = match c.placement {
        Placement::Free => rng.random_range(-20.0..=20.0),
        Placement::Ground { up } => {
            let drop = c.shooter_up - up;
            let reach = (c.distance.mean().powi(2) - drop * drop).max(1.0).sqrt();
            -drop.atan2(reach).to_degrees()
        }
    };
    let mut scene = Scene {
        shooter,
        trajectory: Trajectory {
            azimuth_deg,
            inclination_deg,
        },
        vb,
        vs,
        cameras: Vec::with_capacity(c.cameras),
        fire_time: c.fire_time,
    };
    let dir = scene.trajectory.unit();
    // Orthonormal basis around the trajectory.
    let helper = if dir[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let e1 = normalize(cross(dir, helper));
    let e2 = cross(dir, e1);

    let mut rejections = 0;
    while scene.cameras.len() < c.cameras {
        let position = match c.placement {
            Placement::Free => {
                let d = sample(&mut rng, c.distance);
                let alpha = sample(&mut rng, c.alpha_deg).to_radians();
                let phi = rng.random_range(0.0..2.0 * PI);
                let (ca, sa) = (alpha.cos(), alpha.sin());
                let v: [f64; 3] = core::array::from_fn(|k| {
                    d * (ca * dir[k] + sa * (phi.cos() * e1[k] + phi.sin() * e2[k]))
                });
                EnuPoint::new(shooter.east + v[0], shooter.north + v[1], shooter.up + v[2])
            }
            Placement::Ground { up } => {
                let d = sample(&mut rng, c.distance);
                let drop = c.shooter_up - up;
                let reach = (d * d - drop * drop).max(0.0).sqrt();
                let spread = (c.alpha_deg.max + 10.0).min(180.0);
                let bearing = (azimuth_deg + rng.random_range(-spread..=spread)).to_radians();
                EnuPoint::new(
                    shooter.east + reach * bearing.sin(),
                    shooter.north + reach * bearing.cos(),
                    up,
                )
            }
        };
        let cam = SceneCamera {
            id: alloc::format!("cam{}", scene.cameras.len() + 1),
            position,
        };
        let arrival = arrival_at(&scene, &cam)?;
        let ok = c.distance.contains(arrival.distance)
            && c.alpha_deg.contains(arrival.alpha.to_degrees())
            && (!c.require_shock || arrival.shock_time.is_some());
        if ok {
            scene.cameras.push(cam);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(OracleError::ConstraintUnsatisfiable(rejections));
            }
        }
    }
    Ok(scene)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub rate: u32,
    pub noise_db: f64,
    /// Global time of the first sample; defaults to `fire_time - 0.5`.
    pub start: Option<f64>,
    /// Clip length in seconds; defaults to 0.5 s past the muzzle blast.
    pub duration: Option<f64>,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            rate: 44_100,
            noise_db: -40.0,
            start: None,
            duration: None,
            seed: 0,
        }
    }
}

/// Recording of one camera: unit impulses at the shock (if any) and muzzle
/// arrivals over uniform white noise at `noise_db` RMS.
pub fn synthesize_audio(
    scene: &Scene,
    cam_id: &str,
    opts: &SynthOptions,
) -> Result<AudioClip, OracleError> {
    let cam = scene.camera(cam_id)?;
    let arrival = arrival_at(scene, cam)?;
    let start = opts.start.unwrap_or(scene.fire_time - 0.5);
    let duration = opts.duration.unwrap_or(arrival.muzzle_time - start + 0.5);
    if !(duration > 0.0 && duration.is_finite() && start.is_finite()) {
        return Err(OracleError::InvalidScene("clip duration must be positive"));
    }
    let rate = opts.rate as f64;
    let len = (duration * rate).round().max(1.0) as usize;
    let amp = 10f64.powf(opts.noise_db / 20.0) * 3f64.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples: Vec<f64> = (0..len)
        .map(|_| amp * rng.random_range(-1.0..=1.0))
        .collect();
    for t in [arrival.shock_time, Some(arrival.muzzle_time)]
        .into_iter()
        .flatten()
    {
        let idx = ((t - start) * rate).round();
        if idx >= 0.0 && (idx as usize) < len {
            samples[idx as usize] = 1.0;
        }
    }
    Ok(AudioClip::new(samples, opts.rate, cam.id.clone())?)
}
