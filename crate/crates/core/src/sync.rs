//! Pairwise recording offsets and their aggregation into one global timeline.
//!
//! Offset convention: for videos `i` and `j`, `offset = start_j - start_i` on
//! the global timeline, so an event at local time `t_i` in `i` appears at
//! `t_j = t_i - offset` in `j`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::fft::fft_in_place;

pub const ANALYSIS_RATE: u32 = 8_000;
pub const CONFIDENCE_FLOOR: f64 = 0.1;
/// Manual edges weigh this many times the strongest audio confidence.
pub const MANUAL_WEIGHT_FACTOR: f64 = 10.0;
const MIN_AUDIO_WEIGHT: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyncError {
    #[error("correlation peak is ambiguous (confidence {:.3})", .estimate.confidence)]
    InsufficientOverlap { estimate: PairwiseOffset },
    #[error("anchor video {0} does not appear in any offset")]
    AnchorMissing(String),
    #[error("no offsets to aggregate")]
    NoOffsets,
    #[error("frame {frame} of {video} lies outside the recording")]
    FrameOutOfRange { video: String, frame: u64 },
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("offset graph is numerically singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMethod {
    Audio,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseOffset {
    pub video_i: String,
    pub video_j: String,
    /// `start_j - start_i`, seconds.
    pub offset: f64,
    pub confidence: f64,
    pub method: SyncMethod,
    /// Stated timing uncertainty, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
}

impl PairwiseOffset {
    /// Same measurement seen from `j` to `i`.
    pub fn reversed(&self) -> Self {
        PairwiseOffset {
            video_i: self.video_j.clone(),
            video_j: self.video_i.clone(),
            offset: -self.offset,
            ..self.clone()
        }
    }

    fn same_pair(&self, a: &str, b: &str) -> bool {
        (self.video_i == a && self.video_j == b) || (self.video_i == b && self.video_j == a)
    }
}

/// Area-averaging resampler for decimation (keeps impulses visible), linear
/// interpolation when upsampling.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let out_len = ((samples.len() as f64) / ratio).floor().max(1.0) as usize;
    if ratio < 1.0 {
        return (0..out_len)
            .map(|m| {
                let u = m as f64 * ratio;
                let k = u.floor() as usize;
                let frac = u - k as f64;
                let next = samples.get(k + 1).copied().unwrap_or(samples[k]);
                samples[k] * (1.0 - frac) + next * frac
            })
            .collect();
    }
    let mut cumulative = Vec::with_capacity(samples.len() + 1);
    cumulative.push(0.0);
    let mut acc = 0.0;
    for x in samples {
        acc += x;
        cumulative.push(acc);
    }
    let integral = |u: f64| {
        let u = u.min(samples.len() as f64);
        let k = u.floor() as usize;
        let frac = u - k as f64;
        cumulative[k]
            + if k < samples.len() {
                frac * samples[k]
            } else {
                0.0
            }
    };
    (0..out_len)
        .map(|m| (integral((m + 1) as f64 * ratio) - integral(m as f64 * ratio)) / ratio)
        .collect()
}

/// Phase-transform weighted cross-correlation; entry `l + max_lag` holds
/// lag `l` where the correlation is `sum_n a[n + l] * b[n]`.
pub fn gcc_phat(a: &[f64], b: &[f64], max_lag: usize) -> Vec<f64> {
    let n = (a.len() + b.len()).next_power_of_two();
    let mut fa: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut fb: Vec<Complex64> = b.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    fb.resize(n, Complex64::new(0.0, 0.0));
    fft_in_place(&mut fa, false);
    fft_in_place(&mut fb, false);
    let peak_mag = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| (x * y.conj()).norm())
        .fold(0.0, f64::max);
    let floor = peak_mag * 1e-12;
    let mut cross: Vec<Complex64> = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let g = x * y.conj();
            let m = g.norm();
            if m > floor && m > 0.0 {
                g / m
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    fft_in_place(&mut cross, true);
    let scale = 1.0 / n as f64;
    let max_lag = max_lag.min(n / 2 - 1);
    (0..=2 * max_lag)
        .map(|k| {
            let lag = k as isize - max_lag as isize;
            let idx = if lag >= 0 {
                lag as usize
            } else {
                (n as isize + lag) as usize
            };
            cross[idx].re * scale
        })
        .collect()
}

/// Audio-based offset between two recordings of the same scene.
///
/// Both clips are brought to [`ANALYSIS_RATE`]; the peak of the whitened
/// cross-correlation within `+-max_lag` seconds, refined by parabolic
/// interpolation, gives the offset. Confidence is `1 - second / first` peak.
/// Estimates under [`CONFIDENCE_FLOOR`] come back inside
/// [`SyncError::InsufficientOverlap`].
pub fn estimate_offset(
    a: &AudioClip,
    b: &AudioClip,
    max_lag: f64,
) -> Result<PairwiseOffset, SyncError> {
    if !(max_lag > 0.0 && max_lag.is_finite()) {
        return Err(SyncError::InvalidInput("max lag must be positive"));
    }
    if max_lag > a.duration().min(b.duration()) {
        return Err(SyncError::InvalidInput("max lag exceeds the shorter clip"));
    }
    let xa = resample(&a.samples, a.rate, ANALYSIS_RATE);
    let xb = resample(&b.samples, b.rate, ANALYSIS_RATE);
    let rate = ANALYSIS_RATE as f64;
    let lag_samples = (max_lag * rate).round() as usize;
    let corr = gcc_phat(&xa, &xb, lag_samples);
    let center = (corr.len() / 2) as isize;

    let best = (0..corr.len()).fold(0, |b, k| if corr[k] > corr[b] { k } else { b });
    let peak = corr[best];
    let guard = (0.002 * rate).ceil() as usize;
    let second = corr
        .iter()
        .enumerate()
        .filter(|(k, _)| k.abs_diff(best) > guard)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    let confidence = if peak > 0.0 {
        (1.0 - second / peak).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let mut lag = (best as isize - center) as f64;
    if best > 0 && best + 1 < corr.len() {
        let (l, c, r) = (corr[best - 1], corr[best], corr[best + 1]);
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            lag += (0.5 * (l - r) / denom).clamp(-0.5, 0.5);
        }
    }
    let estimate = PairwiseOffset {
        video_i: a.source_video.clone(),
        video_j: b.source_video.clone(),
        offset: lag / rate,
        confidence,
        method: SyncMethod::Audio,
        uncertainty: Some(1.0 / rate),
    };
    if confidence < CONFIDENCE_FLOOR {
        return Err(SyncError::InsufficientOverlap { estimate });
    }
    Ok(estimate)
}

/// One side of a manual frame match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMark {
    pub video: String,
    pub frame: u64,
    pub fps: f64,
    /// Recording length, seconds.
    pub duration: f64,
}

/// Offset from a human frame match: both frames show the same instant.
/// The stated uncertainty is half a frame on each side.
pub fn refine_manual(i: &FrameMark, j: &FrameMark) -> Result<PairwiseOffset, SyncError> {
    for m in [i, j] {
        if !(m.fps > 0.0 && m.fps.is_finite()) {
            return Err(SyncError::InvalidInput("fps must be positive"));
        }
        if m.frame as f64 / m.fps > m.duration {
            return Err(SyncError::FrameOutOfRange {
                video: m.video.clone(),
                frame: m.frame,
            });
        }
    }
    Ok(PairwiseOffset {
        video_i: i.video.clone(),
        video_j: j.video.clone(),
        offset: i.frame as f64 / i.fps - j.frame as f64 / j.fps,
        confidence: 1.0,
        method: SyncMethod::Manual,
        uncertainty: Some(0.5 * (1.0 / i.fps + 1.0 / j.fps)),
    })
}

/// Inserts `new` into `offsets`. A manual edge replaces every earlier edge
/// for the same pair; an audio edge replaces earlier audio edges but never a
/// manual one.
pub fn upsert_offset(offsets: &mut Vec<PairwiseOffset>, new: PairwiseOffset) {
    let has_manual = offsets
        .iter()
        .any(|o| o.method == SyncMethod::Manual && o.same_pair(&new.video_i, &new.video_j));
    if new.method == SyncMethod::Audio && has_manual {
        return;
    }
    offsets.retain(|o| !o.same_pair(&new.video_i, &new.video_j));
    offsets.push(new);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeResidual {
    pub video_i: String,
    pub video_j: String,
    pub offset: f64,
    pub weight: f64,
    pub method: SyncMethod,
    /// `|start_j - start_i - offset|`, seconds.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalTimeline {
    /// Video id -> start time on the global timeline, seconds.
    pub start_times: BTreeMap<String, f64>,
    pub residuals: Vec<EdgeResidual>,
    /// Video id -> connected-component label.
    pub components: BTreeMap<String, usize>,
    /// Zero-time anchor of each component, indexed by label.
    pub anchors: Vec<String>,
}

impl GlobalTimeline {
    pub fn is_connected(&self) -> bool {
        self.anchors.len() <= 1
    }

    /// Local time in `video` -> global time.
    pub fn to_global(&self, video: &str, local: f64) -> Option<f64> {
        self.start_times.get(video).map(|s| s + local)
    }

    /// Confidence-weighted squared residual sum for arbitrary start times.
    pub fn weighted_cost(&self, starts: &BTreeMap<String, f64>) -> f64 {
        self.residuals
            .iter()
            .map(|e| {
                let r = starts[&e.video_j] - starts[&e.video_i] - e.offset;
                e.weight * r * r
            })
            .sum()
    }
}

/// Weighted least-squares start times for every connected component of the
/// offset graph.
///
/// The anchor's component is pinned at `anchor = 0`; other components are
/// pinned at their lexicographically smallest video id.
pub fn aggregate_timeline(
    offsets: &[PairwiseOffset],
    anchor: &str,
) -> Result<GlobalTimeline, SyncError> {
    if offsets.is_empty() {
        return Err(SyncError::NoOffsets);
    }
    let mut edges: Vec<PairwiseOffset> = Vec::new();
    for o in offsets {
        if !o.offset.is_finite() || o.video_i == o.video_j {
            return Err(SyncError::InvalidInput(
                "offset edges must be finite and join two videos",
            ));
        }
        let manual_exists = offsets
            .iter()
            .any(|m| m.method == SyncMethod::Manual && m.same_pair(&o.video_i, &o.video_j));
        if o.method == SyncMethod::Audio && manual_exists {
            continue;
        }
        edges.push(o.clone());
    }
    let max_audio = edges
        .iter()
        .filter(|e| e.method == SyncMethod::Audio)
        .map(|e| e.confidence)
        .fold(0.0, f64::max);
    let manual_weight = MANUAL_WEIGHT_FACTOR * if max_audio > 0.0 { max_audio } else { 1.0 };
    let weight = |e: &PairwiseOffset| match e.method {
        SyncMethod::Manual => manual_weight,
        SyncMethod::Audio => e.confidence.max(MIN_AUDIO_WEIGHT),
    };

    let mut ids: Vec<&str> = edges
        .iter()
        .flat_map(|e| [e.video_i.as_str(), e.video_j.as_str()])
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if !ids.contains(&anchor) {
        return Err(SyncError::AnchorMissing(anchor.into()));
    }
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    let n = ids.len();

    // Connected components by union-find.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in &edges {
        let (a, b) = (
            find(&mut parent, index[e.video_i.as_str()]),
            find(&mut parent, index[e.video_j.as_str()]),
        );
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let roots: Vec<usize> = (0..n).map(|k| find(&mut parent, k)).collect();
    let anchor_root = roots[index[anchor]];
    let mut component_roots: Vec<usize> = roots.clone();
    component_roots.sort_unstable();
    component_roots.dedup();
    // The anchor's component gets label 0; the rest follow in id order.
    component_roots.sort_by_key(|&r| (r != anchor_root, r));

    let mut start = alloc::vec![0.0; n];
    let mut anchors = Vec::new();
    for &root in &component_roots {
        let members: Vec<usize> = (0..n).filter(|&k| roots[k] == root).collect();
        let pin = if root == anchor_root {
            index[anchor]
        } else {
            members[0]
        };
        anchors.push(String::from(ids[pin]));
        let free: Vec<usize> = members.iter().copied().filter(|&k| k != pin).collect();
        if free.is_empty() {
            continue;
        }
        let slot: BTreeMap<usize, usize> = free.iter().enumerate().map(|(s, &k)| (k, s)).collect();
        let m = free.len();
        let mut lhs = alloc::vec![alloc::vec![0.0; m]; m];
        let mut rhs = alloc::vec![0.0; m];
        for e in edges
            .iter()
            .filter(|e| roots[index[e.video_i.as_str()]] == root)
        {
            let w = weight(e);
            let (i, j) = (index[e.video_i.as_str()], index[e.video_j.as_str()]);
            // residual = s_j - s_i - offset
            if let Some(&si) = slot.get(&i) {
                lhs[si][si] += w;
                rhs[si] -= w * e.offset;
            }
            if let Some(&sj) = slot.get(&j) {
                lhs[sj][sj] += w;
                rhs[sj] += w * e.offset;
            }
            if let (Some(&si), Some(&sj)) = (slot.get(&i), slot.get(&j)) {
                lhs[si][sj] -= w;
                lhs[sj][si] -= w;
            }
        }
        let solved = solve_dense(lhs, rhs).ok_or(SyncError::Singular)?;
        for (s, &k) in free.iter().enumerate() {
            start[k] = solved[s];
        }
    }

    let label: BTreeMap<usize, usize> = component_roots
        .iter()
        .enumerate()
        .map(|(l, &r)| (r, l))
        .collect();
    let residuals = edges
        .iter()
        .map(|e| {
            let (i, j) = (index[e.video_i.as_str()], index[e.video_j.as_str()]);
            EdgeResidual {
                video_i: e.video_i.clone(),
                video_j: e.video_j.clone(),
                offset: e.offset,
                weight: weight(e),
                method: e.method,
                residual: (start[j] - start[i] - e.offset).abs(),
            }
        })
        .collect();
    Ok(GlobalTimeline {
        start_times: ids
            .iter()
            .enumerate()
            .map(|(k, id)| (String::from(*id), start[k]))
            .collect(),
        residuals,
        components: ids
            .iter()
            .enumerate()
            .map(|(k, id)| (String::from(*id), label[&roots[k]]))
            .collect(),
        anchors,
    })
}

/// Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() <= 1e-14 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            let pivot_row = a[col].clone();
            for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = alloc::vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}
