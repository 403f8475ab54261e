//! Single-recording distance estimate from the shockwave / muzzle-blast gap
//! of a supersonic bullet.
//!
//! Geometry, in the plane containing the bullet trajectory and the camera:
//! the shooter sits at the origin and fires along +x. The bullet reaches
//! point X after `t1`, and the shock front leaving X travels for `t2` along
//! the Mach-cone normal, which makes an angle `theta = asin(vs / vb)` with
//! the cone axis' perpendicular, i.e. direction `(sin theta, cos theta)`.
//! The camera at slant distance `D` and angle `alpha` from the trajectory
//! hears the muzzle blast `t_diff` after the shock, so `D = vs (t1 + t2 + t_diff)`.
//! Equating both descriptions of the camera position gives
//!
//! ```text
//! (vb - vs cos a) t1 + (vs sin th - vs cos a) t2 = vs t_diff cos a
//! (  - vs sin a ) t1 + (vs cos th - vs sin a) t2 = vs t_diff sin a
//! ```

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interval::Interval;

pub const DEFAULT_SAMPLES: usize = 10_000;
pub const HISTOGRAM_BINS: usize = 50;
pub const MIN_BIN_WIDTH_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BallisticsError {
    #[error("bullet speed {vb} m/s does not exceed the speed of sound {vs} m/s")]
    Subsonic { vs: f64, vb: f64 },
    #[error("singular timing system")]
    SingularSystem,
    #[error("camera cannot hear a shockwave at this angle (t1 = {t1:.6}, t2 = {t2:.6})")]
    InfeasibleGeometry { t1: f64, t2: f64 },
    #[error("shooter elevation {de} m exceeds slant distance {d} m")]
    ElevationExceedsDistance { d: f64, de: f64 },
    #[error("no Monte Carlo sample produced a feasible solution")]
    NoFeasibleSamples,
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
}

/// Mach half-angle `asin(vs / vb)` in radians.
pub fn mach_angle(vs: f64, vb: f64) -> Result<f64, BallisticsError> {
    if !(vs.is_finite() && vb.is_finite()) || vs <= 0.0 {
        return Err(BallisticsError::InvalidInput(
            "speeds must be finite and positive",
        ));
    }
    if vb <= vs {
        return Err(BallisticsError::Subsonic { vs, vb });
    }
    Ok((vs / vb).asin())
}

/// Solves the two-equation timing model for `(t1, t2)`.
///
/// `alpha` is in radians and must lie in `[0, pi/2)`.
pub fn solve_t1_t2(
    vs: f64,
    vb: f64,
    alpha: f64,
    t_diff: f64,
) -> Result<(f64, f64), BallisticsError> {
    let theta = mach_angle(vs, vb)?;
    if !(alpha.is_finite() && (0.0..FRAC_PI_2).contains(&alpha)) {
        return Err(BallisticsError::InvalidInput("alpha must lie in [0, pi/2)"));
    }
    if !(t_diff.is_finite() && t_diff >= 0.0) {
        return Err(BallisticsError::InvalidInput(
            "t_diff must be finite and >= 0",
        ));
    }
    let (sa, ca) = (alpha.sin(), alpha.cos());
    let (st, ct) = (theta.sin(), theta.cos());

    let a11 = vb - vs * ca;
    let a12 = vs * st - vs * ca;
    let a21 = -vs * sa;
    let a22 = vs * ct - vs * sa;
    let b1 = vs * t_diff * ca;
    let b2 = vs * t_diff * sa;

    let det = a11 * a22 - a12 * a21;
    let scale = (a11.abs() + a12.abs()) * (a21.abs() + a22.abs());
    if det.is_nan() || det.abs() <= 1e-12 * scale {
        return Err(BallisticsError::SingularSystem);
    }
    let t1 = (b1 * a22 - a12 * b2) / det;
    let t2 = (a11 * b2 - b1 * a21) / det;
    // Round-off around alpha = 0 can leave t2 at -1e-18.
    let tol = 1e-12 * (1.0 + t_diff);
    if t1 < -tol || t2 < -tol {
        return Err(BallisticsError::InfeasibleGeometry { t1, t2 });
    }
    Ok((t1.max(0.0), t2.max(0.0)))
}

/// Camera-to-shooter slant distance `vs (t1 + t2 + t_diff)`.
pub fn slant_distance(vs: f64, t1: f64, t2: f64, t_diff: f64) -> Result<f64, BallisticsError> {
    let d = vs * (t1 + t2 + t_diff);
    if d.is_finite() {
        Ok(d)
    } else {
        Err(BallisticsError::InvalidInput("non-finite distance"))
    }
}

/// Ground-plane distance for a shooter elevated `de` above the camera.
pub fn horizontal_distance(d: f64, de: f64) -> Result<f64, BallisticsError> {
    if !(d.is_finite() && de.is_finite()) || d < 0.0 || de < 0.0 {
        return Err(BallisticsError::InvalidInput(
            "distances must be finite and >= 0",
        ));
    }
    if de > d {
        return Err(BallisticsError::ElevationExceedsDistance { d, de });
    }
    Ok((d * d - de * de).sqrt())
}

/// Slant distance for one parameter triple; `alpha` in radians.
pub fn distance_for(vs: f64, vb: f64, alpha: f64, t_diff: f64) -> Result<f64, BallisticsError> {
    let (t1, t2) = solve_t1_t2(vs, vb, alpha, t_diff)?;
    slant_distance(vs, t1, t2, t_diff)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method1Inputs {
    /// Speed of sound range, m/s.
    pub vs_range: Interval,
    /// Bullet speed range, m/s.
    pub vb_range: Interval,
    /// Angle between the shooter->camera line and the trajectory, degrees.
    pub alpha_range_deg: Interval,
    /// Shockwave to muzzle-blast gap, seconds.
    pub t_diff: f64,
    /// Shooter elevation above the camera, meters.
    #[serde(default)]
    pub shooter_elev: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

impl Method1Inputs {
    /// Inputs with the customary `alpha` range of 0..15 degrees.
    pub fn new(vs_range: Interval, vb_range: Interval, t_diff: f64) -> Self {
        Method1Inputs {
            vs_range,
            vb_range,
            alpha_range_deg: Interval::new(0.0, 15.0),
            t_diff,
            shooter_elev: 0.0,
            samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BallisticsError> {
        use BallisticsError::InvalidInput;
        let (vs, vb, al) = (self.vs_range, self.vb_range, self.alpha_range_deg);
        if !vs.is_valid() || vs.min <= 0.0 {
            return Err(InvalidInput(
                "speed of sound range must satisfy 0 < min <= max",
            ));
        }
        if !vb.is_valid() {
            return Err(InvalidInput("bullet speed range must satisfy min <= max"));
        }
        if vb.min <= vs.max {
            return Err(BallisticsError::Subsonic {
                vs: vs.max,
                vb: vb.min,
            });
        }
        if !al.is_valid() || al.min < 0.0 || al.max >= 90.0 {
            return Err(InvalidInput(
                "alpha range must satisfy 0 <= min <= max < 90 degrees",
            ));
        }
        if !(self.t_diff.is_finite() && self.t_diff >= 0.0) {
            return Err(InvalidInput("t_diff must be finite and >= 0"));
        }
        if !(self.shooter_elev.is_finite() && self.shooter_elev >= 0.0) {
            return Err(InvalidInput("shooter elevation must be finite and >= 0"));
        }
        if self.samples == 0 {
            return Err(InvalidInput("samples must be >= 1"));
        }
        Ok(())
    }
}

/// Fixed-width histogram over `[start, start + bin_width * counts.len())`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub start: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(values: &[f64], min: f64, max: f64) -> Self {
        let bin_width = ((max - min) / HISTOGRAM_BINS as f64).max(MIN_BIN_WIDTH_M);
        let bins = (((max - min) / bin_width).ceil() as usize).max(1);
        let mut counts = alloc::vec![0u64; bins];
        for &v in values {
            let idx = (((v - min) / bin_width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Histogram {
            start: min,
            bin_width,
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn end(&self) -> f64 {
        self.start + self.bin_width * self.counts.len() as f64
    }

    /// Bin index holding `x`, clamping values within one bin of either edge.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        if x < self.start - self.bin_width || x >= self.end() + self.bin_width {
            return None;
        }
        let idx = ((x - self.start) / self.bin_width).floor();
        Some((idx.max(0.0) as usize).min(self.counts.len() - 1))
    }

    /// Bin count divided by the largest bin count, in `[0, 1]`.
    pub fn relative_density(&self, bin: usize) -> f64 {
        let peak = self.counts.iter().copied().max().unwrap_or(0);
        if peak == 0 {
            0.0
        } else {
            self.counts[bin] as f64 / peak as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub d_min: f64,
    pub d_max: f64,
    pub d_mean: f64,
    pub dh_min: f64,
    pub dh_max: f64,
    pub dh_mean: f64,
    /// Horizontal-distance samples.
    pub histogram: Histogram,
    pub feasible_fraction: f64,
    pub samples: usize,
}

pub fn estimate_method1(inputs: &Method1Inputs) -> Result<DistanceEstimate, BallisticsError> {
    estimate_method1_with_progress(inputs, &mut |_| {})
}

/// Monte Carlo estimate; `progress` receives the completed fraction at
/// every 1% of the samples and once at the end.
pub fn estimate_method1_with_progress(
    inputs: &Method1Inputs,
    progress: &mut dyn FnMut(f64),
) -> Result<DistanceEstimate, BallisticsError> {
    inputs.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed);
    let report_every = (inputs.samples / 100).max(1);

    let mut slant = Vec::with_capacity(inputs.samples);
    let mut horizontal = Vec::with_capacity(inputs.samples);
    for i in 0..inputs.samples {
        let vs = rng.random_range(inputs.vs_range.min..=inputs.vs_range.max);
        let vb = rng.random_range(inputs.vb_range.min..=inputs.vb_range.max);
        let alpha_deg = rng.random_range(inputs.alpha_range_deg.min..=inputs.alpha_range_deg.max);
        let sample = distance_for(vs, vb, alpha_deg.to_radians(), inputs.t_diff)
            .and_then(|d| Ok((d, horizontal_distance(d, inputs.shooter_elev)?)));
        if let Ok((d, dh)) = sample {
            slant.push(d);
            horizontal.push(dh);
        }
        if (i + 1) % report_every == 0 {
            progress((i + 1) as f64 / inputs.samples as f64);
        }
    }
    progress(1.0);

    if slant.is_empty() {
        return Err(BallisticsError::NoFeasibleSamples);
    }
    let (d_min, d_max, d_mean) = stats(&slant);
    let (dh_min, dh_max, dh_mean) = stats(&horizontal);
    Ok(DistanceEstimate {
        d_min,
        d_max,
        d_mean,
        dh_min,
        dh_max,
        dh_mean,
        histogram: Histogram::build(&horizontal, dh_min, dh_max),
        feasible_fraction: slant.len() as f64 / inputs.samples as f64,
        samples: inputs.samples,
    })
}

fn stats(values: &[f64]) -> (f64, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    // Summation round-off must not push the mean outside [min, max].
    (min, max, mean.clamp(min, max))
}
