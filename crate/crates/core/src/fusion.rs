//! Rasterizes per-camera distance rings and per-pair hyperbola bands onto a
//! common grid and fuses them into a normalized location heatmap.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ballistics::DistanceEstimate;
use crate::geo::{EnuPoint, LocalFrame};
use crate::tdoa::HyperbolaBand;

pub const DEFAULT_CELL_M: f64 = 5.0;
pub const MAX_CELLS: usize = 4_000_000;
pub const DEFAULT_REGION_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error("grid has {0} cells (limit 4e6)")]
    TooManyCells(usize),
    #[error("distance estimate has no feasible samples")]
    EmptyEstimate,
    #[error("hyperbola band has no feasible line")]
    FullyInfeasible,
    #[error("layers were rasterized on different grids")]
    GridMismatch,
    #[error("no layers to fuse")]
    NoLayers,
    #[error("fused evidence is zero everywhere: the layers contradict each other")]
    AllZero,
}

/// Axis-aligned raster over a local frame. Cells are evaluated at their
/// centers, at height `plane_up` (the assumed source height).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub frame: LocalFrame,
    pub min_east: f64,
    pub min_north: f64,
    pub max_east: f64,
    pub max_north: f64,
    pub cell: f64,
    #[serde(default)]
    pub plane_up: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), FusionError> {
        let finite = [
            self.min_east,
            self.min_north,
            self.max_east,
            self.max_north,
            self.cell,
            self.plane_up,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(FusionError::InvalidGrid("non-finite bounds"));
        }
        if self.max_east <= self.min_east || self.max_north <= self.min_north {
            return Err(FusionError::InvalidGrid("max must exceed min on both axes"));
        }
        if self.cell <= 0.0 {
            return Err(FusionError::InvalidGrid("cell size must be positive"));
        }
        let cells = self.cols().saturating_mul(self.rows());
        if cells > MAX_CELLS {
            return Err(FusionError::TooManyCells(cells));
        }
        Ok(())
    }

    pub fn cols(&self) -> usize {
        ((self.max_east - self.min_east) / self.cell).ceil() as usize
    }

    pub fn rows(&self) -> usize {
        ((self.max_north - self.min_north) / self.cell).ceil() as usize
    }

    pub fn len(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Center of cell `(row, col)`; row 0 is the southern edge.
    pub fn center(&self, row: usize, col: usize) -> EnuPoint {
        EnuPoint::new(
            self.min_east + (col as f64 + 0.5) * self.cell,
            self.min_north + (row as f64 + 0.5) * self.cell,
            self.plane_up,
        )
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols() + col
    }

    pub fn cell_of(&self, p: &EnuPoint) -> Option<(usize, usize)> {
        let col = ((p.east - self.min_east) / self.cell).floor();
        let row = ((p.north - self.min_north) / self.cell).floor();
        if col < 0.0 || row < 0.0 || col as usize >= self.cols() || row as usize >= self.rows() {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Scores every cell row by row; `progress` gets the completed fraction
    /// after every 1% of the rows.
    fn rasterize(
        &self,
        mut score: impl FnMut(&EnuPoint) -> f64,
        progress: &mut dyn FnMut(f64),
    ) -> Vec<f64> {
        let rows = self.rows();
        let every = (rows / 100).max(1);
        let mut out = Vec::with_capacity(self.len());
        for row in 0..rows {
            for col in 0..self.cols() {
                out.push(score(&self.center(row, col)));
            }
            if (row + 1) % every == 0 || row + 1 == rows {
                progress((row + 1) as f64 / rows as f64);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub grid: GridSpec,
    pub scores: Vec<f64>,
    pub label: String,
}

impl Layer {
    pub fn score_at(&self, p: &EnuPoint) -> Option<f64> {
        self.grid
            .cell_of(p)
            .map(|(r, c)| self.scores[self.grid.index(r, c)])
    }

    pub fn scaled(mut self, k: f64) -> Self {
        self.scores.iter_mut().for_each(|s| *s *= k);
        self
    }
}

/// Ring layer: each cell takes the relative histogram density of the
/// estimate at the cell's horizontal distance from the camera. Support is
/// widened by half a cell diagonal so narrow rings cannot fall between cell
/// centers.
pub fn layer_from_annulus(
    est: &DistanceEstimate,
    camera: &EnuPoint,
    grid: &GridSpec,
    label: impl Into<String>,
) -> Result<Layer, FusionError> {
    layer_from_annulus_with_progress(est, camera, grid, label, &mut |_| {})
}

pub fn layer_from_annulus_with_progress(
    est: &DistanceEstimate,
    camera: &EnuPoint,
    grid: &GridSpec,
    label: impl Into<String>,
    progress: &mut dyn FnMut(f64),
) -> Result<Layer, FusionError> {
    grid.validate()?;
    let hist = &est.histogram;
    if hist.total() == 0 || est.feasible_fraction <= 0.0 {
        return Err(FusionError::EmptyEstimate);
    }
    let slack = grid.cell * core::f64::consts::SQRT_2 / 2.0;
    let (lo, hi) = (est.dh_min - slack, est.dh_max + slack);
    let scores = grid.rasterize(
        |p| {
            let r = p.horizontal_distance(camera);
            if r < lo || r > hi {
                return 0.0;
            }
            let clamped = r.clamp(hist.start, hist.end() - hist.bin_width * 1e-9);
            hist.bin_of(clamped)
                .map_or(0.0, |b| hist.relative_density(b))
        },
        progress,
    );
    Ok(Layer {
        grid: grid.clone(),
        scores,
        label: label.into(),
    })
}

/// Triangular band profile in range-difference space: 1 on the center line,
/// falling linearly to 0 at the lower and upper lines.
///
/// When the lower bound is clamped to zero the arrival order itself is
/// uncertain, so the profile is evaluated on the absolute range difference
/// and covers both sides of the bisector.
pub fn band_profile(b: &HyperbolaBand, delta: f64) -> f64 {
    let delta = if b.two_a_lower == 0.0 {
        delta.abs()
    } else {
        delta
    };
    let (lo, mid, hi) = (
        b.two_a_lower,
        b.two_a_center.clamp(b.two_a_lower, b.two_a_upper),
        b.two_a_upper,
    );
    if delta < lo || delta > hi {
        0.0
    } else if delta <= mid {
        if mid > lo {
            (delta - lo) / (mid - lo)
        } else {
            1.0
        }
    } else if hi > mid {
        (hi - delta) / (hi - mid)
    } else {
        1.0
    }
}

pub fn layer_from_band(
    b: &HyperbolaBand,
    grid: &GridSpec,
    label: impl Into<String>,
) -> Result<Layer, FusionError> {
    layer_from_band_with_progress(b, grid, label, &mut |_| {})
}

pub fn layer_from_band_with_progress(
    b: &HyperbolaBand,
    grid: &GridSpec,
    label: impl Into<String>,
    progress: &mut dyn FnMut(f64),
) -> Result<Layer, FusionError> {
    grid.validate()?;
    if !b.feasible[0] {
        return Err(FusionError::FullyInfeasible);
    }
    let scores = grid.rasterize(
        |p| band_profile(b, p.distance(&b.far) - p.distance(&b.near)),
        progress,
    );
    Ok(Layer {
        grid: grid.clone(),
        scores,
        label: label.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    /// Cellwise product: intersection of all evidence.
    #[default]
    Product,
    /// Cellwise mean, for diagnosing contradictory layers.
    Sum,
}

/// A 4-connected set of cells at or above the region threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub cells: Vec<(usize, usize)>,
    pub peak: f64,
    /// Score-weighted centroid, local frame meters.
    pub centroid: EnuPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid: GridSpec,
    /// Row-major, max-normalized to 1.
    pub scores: Vec<f64>,
    pub layers: Vec<String>,
    pub threshold: f64,
    /// Regions sorted by peak score, strongest first.
    pub argmax_region: Vec<Region>,
}

impl Heatmap {
    /// Centroid of the region holding the global maximum.
    pub fn best_centroid(&self) -> EnuPoint {
        self.argmax_region[0].centroid
    }
}

pub fn fuse(layers: &[Layer], mode: FuseMode) -> Result<Heatmap, FusionError> {
    fuse_with_threshold(layers, mode, DEFAULT_REGION_THRESHOLD)
}

pub fn fuse_with_threshold(
    layers: &[Layer],
    mode: FuseMode,
    threshold: f64,
) -> Result<Heatmap, FusionError> {
    let first = layers.first().ok_or(FusionError::NoLayers)?;
    if layers
        .iter()
        .any(|l| l.grid != first.grid || l.scores.len() != first.scores.len())
    {
        return Err(FusionError::GridMismatch);
    }
    let grid = first.grid.clone();
    let mut scores = first.scores.clone();
    for layer in &layers[1..] {
        for (acc, s) in scores.iter_mut().zip(&layer.scores) {
            match mode {
                FuseMode::Product => *acc *= s,
                FuseMode::Sum => *acc += s,
            }
        }
    }
    if mode == FuseMode::Sum {
        let n = layers.len() as f64;
        scores.iter_mut().for_each(|s| *s /= n);
    }
    let max = scores.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 || !max.is_finite() {
        return Err(FusionError::AllZero);
    }
    scores.iter_mut().for_each(|s| *s /= max);

    let argmax_region = regions(&grid, &scores, threshold);
    Ok(Heatmap {
        grid,
        scores,
        layers: layers.iter().map(|l| l.label.clone()).collect(),
        threshold,
        argmax_region,
    })
}

fn regions(grid: &GridSpec, scores: &[f64], threshold: f64) -> Vec<Region> {
    // Cells exactly on the threshold must not flip with rounding.
    let threshold = threshold - 1e-12;
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut seen = alloc::vec![false; scores.len()];
    let mut out = Vec::new();
    for start in 0..scores.len() {
        if seen[start] || scores[start] < threshold {
            continue;
        }
        seen[start] = true;
        let mut stack = alloc::vec![start];
        let mut cells = Vec::new();
        let (mut we, mut wn, mut wsum, mut peak) = (0.0, 0.0, 0.0, 0.0_f64);
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / cols, idx % cols);
            let s = scores[idx];
            let p = grid.center(r, c);
            we += s * p.east;
            wn += s * p.north;
            wsum += s;
            peak = peak.max(s);
            cells.push((r, c));
            let neighbours = [
                (r > 0).then(|| idx - cols),
                (r + 1 < rows).then(|| idx + cols),
                (c > 0).then(|| idx - 1),
                (c + 1 < cols).then(|| idx + 1),
            ];
            for n in neighbours.into_iter().flatten() {
                if !seen[n] && scores[n] >= threshold {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        cells.sort_unstable();
        out.push(Region {
            cells,
            peak,
            centroid: EnuPoint::new(we / wsum, wn / wsum, grid.plane_up),
        });
    }
    out.sort_by(|a, b| b.peak.total_cmp(&a.peak).then(a.cells.cmp(&b.cells)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ballistics::{estimate_method1, Method1Inputs};
    use crate::geo::GeoPoint;
    use crate::interval::Interval;
    use crate::tdoa::{band, TdoaInputs};

    fn grid(half: f64, cell: f64) -> GridSpec {
        GridSpec {
            frame: LocalFrame::new(GeoPoint::new(36.09, -115.17)).unwrap(),
            min_east: -half,
            min_north: -half,
            max_east: half,
            max_north: half,
            cell,
            plane_up: 0.0,
        }
    }

    fn collapsed_estimate(dh: f64) -> DistanceEstimate {
        // vs * vb * t / (vb - vs) = dh with vs = 340, vb = 680 -> t = dh / 680
        let mut i = Method1Inputs::new(Interval::fixed(340.0), Interval::fixed(680.0), dh / 680.0);
        i.alpha_range_deg = Interval::fixed(0.0);
        i.samples = 10;
        estimate_method1(&i).unwrap()
    }

    #[test]
    fn grid_validation() {
        let mut g = grid(100.0, 5.0);
        assert_eq!(g.cols(), 40);
        assert!(g.validate().is_ok());
        g.cell = 0.0;
        assert!(g.validate().is_err());
        let mut g = grid(100.0, 0.05);
        g.max_east = 1000.0;
        assert!(matches!(g.validate(), Err(FusionError::TooManyCells(_))));
    }

    #[test]
    fn collapsed_annulus_support() {
        let g = grid(600.0, 5.0);
        let est = collapsed_estimate(400.0);
        let layer = layer_from_annulus(&est, &EnuPoint::ORIGIN, &g, "m1").unwrap();
        let slack = 5.0 * core::f64::consts::SQRT_2 / 2.0;
        let mut nonzero = 0;
        for row in 0..g.rows() {
            for col in 0..g.cols() {
                let s = layer.scores[g.index(row, col)];
                let r = g.center(row, col).horizontal_distance(&EnuPoint::ORIGIN);
                if s > 0.0 {
                    nonzero += 1;
                    assert!((r - 400.0).abs() <= est.histogram.bin_width + slack);
                }
            }
        }
        assert!(nonzero > 100);
    }

    #[test]
    fn annulus_support_bound() {
        let g = grid(1500.0, 10.0);
        let mut i = Method1Inputs::new(
            Interval::new(331.3, 346.0),
            Interval::new(700.0, 900.0),
            0.4,
        );
        i.samples = 2000;
        let est = estimate_method1(&i).unwrap();
        let cam = EnuPoint::planar(100.0, -50.0);
        let layer = layer_from_annulus(&est, &cam, &g, "m1").unwrap();
        for row in 0..g.rows() {
            for col in 0..g.cols() {
                if layer.scores[g.index(row, col)] > 0.0 {
                    let r = g.center(row, col).horizontal_distance(&cam);
                    assert!(r >= est.dh_min - g.cell && r <= est.dh_max + g.cell);
                }
            }
        }
    }

    #[test]
    fn band_profile_shape() {
        let b = band(&TdoaInputs::new(
            EnuPoint::planar(-200.0, 0.0),
            0.0,
            EnuPoint::planar(200.0, 0.0),
            0.3,
            Interval::new(331.3, 346.0),
        ))
        .unwrap();
        assert_eq!(band_profile(&b, b.two_a_center), 1.0);
        assert_eq!(band_profile(&b, b.two_a_lower - 0.01), 0.0);
        assert_eq!(band_profile(&b, b.two_a_upper + 0.01), 0.0);
        let mid_low = (b.two_a_lower + b.two_a_center) / 2.0;
        assert!((band_profile(&b, mid_low) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn band_layer_peaks_on_center_line() {
        let g = grid(400.0, 2.0);
        let b = band(&TdoaInputs::new(
            EnuPoint::planar(-200.0, 0.0),
            0.0,
            EnuPoint::planar(200.0, 0.0),
            0.3,
            Interval::fixed(340.0),
        ))
        .unwrap();
        let layer = layer_from_band(&b, &g, "m2").unwrap();
        // Vertex of the center line: a = 340 * 0.3 / 2 = 51 m toward the near focus.
        let on_line = EnuPoint::planar(-51.0, 0.0);
        assert!(layer.score_at(&on_line).unwrap() > 0.9);
        assert_eq!(layer.score_at(&EnuPoint::planar(150.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn fuse_identity_and_squaring() {
        let g = grid(500.0, 5.0);
        let layer = layer_from_annulus(&collapsed_estimate(300.0), &EnuPoint::ORIGIN, &g, "a")
            .unwrap()
            .scaled(0.25);
        let single = fuse(core::slice::from_ref(&layer), FuseMode::Product).unwrap();
        let max = single.scores.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        for (s, l) in single.scores.iter().zip(&layer.scores) {
            assert!((s - l / 0.25).abs() < 1e-12);
        }
        let squared = fuse(&[layer.clone(), layer], FuseMode::Product).unwrap();
        let cells = |h: &Heatmap| {
            let mut all: Vec<_> = h
                .argmax_region
                .iter()
                .flat_map(|r| r.cells.clone())
                .collect();
            all.sort_unstable();
            all
        };
        assert_eq!(cells(&single), cells(&squared));
    }

    #[test]
    fn fuse_errors() {
        let g = grid(100.0, 5.0);
        assert_eq!(fuse(&[], FuseMode::Product), Err(FusionError::NoLayers));
        let a = Layer {
            grid: g.clone(),
            scores: alloc::vec![0.0; g.len()],
            label: "z".into(),
        };
        assert_eq!(
            fuse(core::slice::from_ref(&a), FuseMode::Product),
            Err(FusionError::AllZero)
        );
        let other = grid(200.0, 5.0);
        let b = Layer {
            grid: other.clone(),
            scores: alloc::vec![1.0; other.len()],
            label: "o".into(),
        };
        assert_eq!(fuse(&[a, b], FuseMode::Sum), Err(FusionError::GridMismatch));
    }

    #[test]
    fn contradictory_rings_annihilate() {
        let g = grid(1000.0, 5.0);
        let a = layer_from_annulus(
            &collapsed_estimate(100.0),
            &EnuPoint::planar(-500.0, 0.0),
            &g,
            "a",
        )
        .unwrap();
        let b = layer_from_annulus(
            &collapsed_estimate(100.0),
            &EnuPoint::planar(500.0, 0.0),
            &g,
            "b",
        )
        .unwrap();
        assert_eq!(
            fuse(&[a.clone(), b.clone()], FuseMode::Product),
            Err(FusionError::AllZero)
        );
        assert!(fuse(&[a, b], FuseMode::Sum).is_ok());
    }

    #[test]
    fn regions_are_connected_components() {
        let mut g = grid(10.0, 1.0);
        g.min_north = 0.0;
        g.max_north = 1.0;
        let mut scores = alloc::vec![0.0; g.len()];
        scores[2] = 1.0;
        scores[3] = 0.95;
        scores[10] = 0.92;
        let layer = Layer {
            grid: g,
            scores,
            label: "x".into(),
        };
        let h = fuse(&[layer], FuseMode::Product).unwrap();
        assert_eq!(h.argmax_region.len(), 2);
        assert_eq!(h.argmax_region[0].cells, alloc::vec![(0, 2), (0, 3)]);
        assert_eq!(h.argmax_region[0].peak, 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_layer(g: &GridSpec, seed: &[u8]) -> Layer {
            let scores = (0..g.len())
                .map(|i| seed[i % seed.len()] as f64 / 255.0)
                .collect();
            Layer {
                grid: g.clone(),
                scores,
                label: "r".into(),
            }
        }

        proptest! {
            #[test]
            fn argmax_invariant_under_scaling(
                a in proptest::collection::vec(1u8..=255, 7..40),
                b in proptest::collection::vec(1u8..=255, 5..33),
                k in 0.01..100.0f64,
            ) {
                let g = grid(20.0, 2.0);
                let la = random_layer(&g, &a);
                let lb = random_layer(&g, &b);
                let base = fuse(&[la.clone(), lb.clone()], FuseMode::Product).unwrap();
                let scaled = fuse(&[la.clone().scaled(k), lb.clone()], FuseMode::Product).unwrap();
                prop_assert_eq!(&base.argmax_region.iter().map(|r| r.cells.clone()).collect::<Vec<_>>(),
                                &scaled.argmax_region.iter().map(|r| r.cells.clone()).collect::<Vec<_>>());
                let swapped = fuse(&[lb, la], FuseMode::Product).unwrap();
                for (x, y) in base.scores.iter().zip(&swapped.scores) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn product_regions_have_support_everywhere(
                a in proptest::collection::vec(0u8..=255, 7..40),
                b in proptest::collection::vec(0u8..=255, 5..33),
            ) {
                let g = grid(20.0, 2.0);
                let layers = [random_layer(&g, &a), random_layer(&g, &b)];
                if let Ok(h) = fuse(&layers, FuseMode::Product) {
                    for region in &h.argmax_region {
                        for &(r, c) in &region.cells {
                            for l in &layers {
                                prop_assert!(l.scores[g.index(r, c)] > 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
}
