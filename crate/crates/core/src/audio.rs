//! Marking aids: spectrogram, short-time power envelope and an energy-ratio
//! transient detector that proposes candidate gunshot times for a human to
//! confirm.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fft::fft_in_place;

pub const MIN_RATE: u32 = 8_000;
pub const MAX_RATE: u32 = 192_000;
pub const DB_FLOOR: f64 = -100.0;
pub const DEFAULT_WINDOW: usize = 1024;
pub const DEFAULT_HOP: usize = 256;

const SHORT_WINDOW_S: f64 = 0.005;
const LONG_WINDOW_S: f64 = 0.5;
const MIN_DETECT_CLIP_S: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AudioError {
    #[error("sample rate {0} Hz outside 8000..=192000")]
    UnsupportedRate(u32),
    #[error("clip is empty")]
    Empty,
    #[error("clip has {len} samples, needs at least {needed}")]
    ClipTooShort { len: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub rate: u32,
    #[serde(default)]
    pub source_video: String,
}

impl AudioClip {
    pub fn new(
        samples: Vec<f64>,
        rate: u32,
        source_video: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if !(MIN_RATE..=MAX_RATE).contains(&rate) {
            return Err(AudioError::UnsupportedRate(rate));
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        Ok(AudioClip {
            samples,
            rate,
            source_video: source_video.into(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn samples_for(&self, seconds: f64) -> usize {
        (seconds * self.rate as f64).round() as usize
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Short-time magnitude spectrum. `magnitudes_db[frame][bin]` holds
/// `20 log10(|X| / sum(w))`, floored at [`DB_FLOOR`], for bins `0..=window/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub magnitudes_db: Vec<Vec<f64>>,
    pub hop: usize,
    pub window: usize,
    pub rate: u32,
    window_sum: f64,
    window_sq_sum: f64,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.magnitudes_db.len()
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.rate as f64 / self.window as f64
    }

    /// Start time of frame `i`, seconds.
    pub fn frame_time(&self, i: usize) -> f64 {
        (i * self.hop) as f64 / self.rate as f64
    }

    /// Window-weighted mean square of frame `i`, recovered from the spectrum
    /// by Parseval's relation.
    pub fn frame_power(&self, i: usize) -> f64 {
        let row = &self.magnitudes_db[i];
        let last = row.len() - 1;
        let energy: f64 = row
            .iter()
            .enumerate()
            .map(|(k, db)| {
                let mag = 10f64.powf(db / 20.0) * self.window_sum;
                let weight = if k == 0 || k == last { 1.0 } else { 2.0 };
                weight * mag * mag
            })
            .sum();
        energy / (self.window as f64 * self.window_sq_sum)
    }

    pub fn peak_bin(&self, i: usize) -> usize {
        let row = &self.magnitudes_db[i];
        (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
    }
}

pub fn spectrogram(clip: &AudioClip, window: usize, hop: usize) -> Result<Spectrogram, AudioError> {
    if !window.is_power_of_two() || window < 2 {
        return Err(AudioError::InvalidParameter(
            "window must be a power of two",
        ));
    }
    if hop == 0 || hop > window {
        return Err(AudioError::InvalidParameter("hop must lie in 1..=window"));
    }
    if clip.len() < window {
        return Err(AudioError::ClipTooShort {
            len: clip.len(),
            needed: window,
        });
    }
    let w = hann(window);
    let window_sum: f64 = w.iter().sum();
    let window_sq_sum: f64 = w.iter().map(|v| v * v).sum();
    let frames = (clip.len() - window) / hop + 1;
    let mut buf = alloc::vec![Complex64::new(0.0, 0.0); window];
    let mut magnitudes_db = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * hop;
        for (slot, (x, wv)) in buf
            .iter_mut()
            .zip(clip.samples[start..start + window].iter().zip(&w))
        {
            *slot = Complex64::new(x * wv, 0.0);
        }
        fft_in_place(&mut buf, false);
        let row = buf[..=window / 2]
            .iter()
            .map(|c| {
                let mag = c.norm() / window_sum;
                if mag > 0.0 {
                    (20.0 * mag.log10()).max(DB_FLOOR)
                } else {
                    DB_FLOOR
                }
            })
            .collect();
        magnitudes_db.push(row);
    }
    Ok(Spectrogram {
        magnitudes_db,
        hop,
        window,
        rate: clip.rate,
        window_sum,
        window_sq_sum,
    })
}

fn prefix_squares(samples: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(samples.len() + 1);
    p.push(0.0);
    let mut acc = 0.0;
    for x in samples {
        acc += x * x;
        p.push(acc);
    }
    p
}

/// Centered sliding-window RMS, one value per input sample. Windows are
/// truncated at the clip edges.
pub fn power_envelope(clip: &AudioClip, win_ms: f64) -> Result<Vec<f64>, AudioError> {
    if !(win_ms >= 1.0 && win_ms.is_finite()) {
        return Err(AudioError::InvalidParameter("window must be >= 1 ms"));
    }
    let win = clip.samples_for(win_ms / 1000.0).max(1);
    if clip.len() < win {
        return Err(AudioError::ClipTooShort {
            len: clip.len(),
            needed: win,
        });
    }
    let p = prefix_squares(&clip.samples);
    let n = clip.len();
    let half = win / 2;
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (lo + win).min(n);
            ((p[hi] - p[lo]) / (hi - lo) as f64).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transient {
    /// Seconds from clip start.
    pub time: f64,
    /// Short/long energy ratio, dB.
    pub score_db: f64,
}

/// Candidate impulsive events, strongest first.
///
/// At each position the energy of a 5 ms window is compared with the mean
/// energy of the preceding 500 ms. Local maxima above `ratio_db` are snapped
/// to the largest-magnitude sample inside their short window, then thinned so
/// no two candidates lie within `min_sep_ms`.
pub fn detect_transients(clip: &AudioClip, ratio_db: f64, min_sep_ms: f64) -> Vec<Transient> {
    let n = clip.len();
    if clip.duration() < MIN_DETECT_CLIP_S {
        return Vec::new();
    }
    let short = clip.samples_for(SHORT_WINDOW_S).max(1);
    let long = clip.samples_for(LONG_WINDOW_S).max(short);
    let p = prefix_squares(&clip.samples);

    // ratio[s0] for short windows [s0, s0 + short)
    let ratio: Vec<f64> = (0..=n - short)
        .map(|s0| {
            let lo = s0.saturating_sub(long);
            if s0 - lo < short {
                return f64::NEG_INFINITY;
            }
            let e_short = (p[s0 + short] - p[s0]) / short as f64;
            let e_long = (p[s0] - p[lo]) / (s0 - lo) as f64;
            if e_short <= 0.0 {
                return f64::NEG_INFINITY;
            }
            10.0 * (e_short / e_long.max(1e-12 * e_short).max(f64::MIN_POSITIVE)).log10()
        })
        .collect();

    let mut peaks = Vec::new();
    for s0 in 0..ratio.len() {
        let r = ratio[s0];
        if r < ratio_db {
            continue;
        }
        let left = if s0 > 0 {
            ratio[s0 - 1]
        } else {
            f64::NEG_INFINITY
        };
        let right = ratio.get(s0 + 1).copied().unwrap_or(f64::NEG_INFINITY);
        if r >= left && r > right {
            let window = &clip.samples[s0..s0 + short];
            let offset = (0..short).fold(0, |b, k| {
                if window[k].abs() > window[b].abs() {
                    k
                } else {
                    b
                }
            });
            peaks.push((s0 + offset, r));
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let sep = clip.samples_for(min_sep_ms.max(0.0) / 1000.0);
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for (idx, score) in peaks {
        if kept.iter().all(|(k, _)| idx.abs_diff(*k) >= sep.max(1)) {
            kept.push((idx, score));
        }
    }
    kept.into_iter()
        .map(|(idx, score_db)| Transient {
            time: idx as f64 / clip.rate as f64,
            score_db,
        })
        .collect()
}
