//! GeoJSON output and the plain-text grid dump.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde_json::{json, Map, Value};
use shotloc_core::audio::Spectrogram;
use shotloc_core::fusion::{GridSpec, Heatmap, Region};
use shotloc_core::geo::{self, EnuPoint, LocalFrame, DEFAULT_SEGMENTS};

use crate::error::{Error, Result};

/// GeoJSON coordinates are rounded to 1e-7 degrees (about 1 cm).
pub fn round_coord(x: f64) -> f64 {
    (x * 1e7).round() / 1e7
}

pub fn round_to(x: f64, digits: i32) -> f64 {
    let k = 10f64.powi(digits);
    (x * k).round() / k
}

fn lonlat(frame: &LocalFrame, p: &EnuPoint) -> Result<Value> {
    let g = geo::from_enu(frame, p)?;
    Ok(json!([round_coord(g.lon), round_coord(g.lat)]))
}

fn feature(geometry: Value, properties: Map<String, Value>) -> Value {
    json!({ "type": "Feature", "geometry": geometry, "properties": properties })
}

pub fn feature_collection(features: Vec<Value>) -> Value {
    json!({ "type": "FeatureCollection", "features": features })
}

pub fn point(frame: &LocalFrame, p: &EnuPoint, properties: Map<String, Value>) -> Result<Value> {
    Ok(feature(
        json!({ "type": "Point", "coordinates": lonlat(frame, p)? }),
        properties,
    ))
}

/// Ring polygon with a hole, or a disc when `r_min` is zero.
pub fn annulus(
    frame: &LocalFrame,
    center: &EnuPoint,
    r_min: f64,
    r_max: f64,
    properties: Map<String, Value>,
) -> Result<Value> {
    // A collapsed estimate still gets a drawable sliver.
    let (r_min, r_max) = if r_max - r_min < 0.5 {
        let mid = 0.5 * (r_min + r_max);
        ((mid - 0.25).max(0.0), mid + 0.25)
    } else {
        (r_min, r_max)
    };
    let poly = geo::annulus_polygon(frame, center, r_min, r_max, DEFAULT_SEGMENTS)?;
    let rings: Vec<Value> = poly
        .rings()
        .into_iter()
        .map(|ring| {
            Value::Array(
                ring.into_iter()
                    .map(|[lon, lat]| json!([round_coord(lon), round_coord(lat)]))
                    .collect(),
            )
        })
        .collect();
    Ok(feature(
        json!({ "type": "Polygon", "coordinates": rings }),
        properties,
    ))
}

pub fn line_string(
    frame: &LocalFrame,
    points: &[EnuPoint],
    properties: Map<String, Value>,
) -> Result<Value> {
    let coords = points
        .iter()
        .map(|p| lonlat(frame, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(feature(
        json!({ "type": "LineString", "coordinates": coords }),
        properties,
    ))
}

/// Convex hull of a region's cell squares, as a closed counter-clockwise ring.
pub fn region_polygon(
    grid: &GridSpec,
    region: &Region,
    properties: Map<String, Value>,
) -> Result<Value> {
    let h = grid.cell / 2.0;
    let mut corners = Vec::with_capacity(region.cells.len() * 4);
    for &(r, c) in &region.cells {
        let p = grid.center(r, c);
        for (dx, dy) in [(-h, -h), (h, -h), (h, h), (-h, h)] {
            corners.push((p.east + dx, p.north + dy));
        }
    }
    let mut hull = convex_hull(corners);
    hull.push(hull[0]);
    let ring = hull
        .iter()
        .map(|&(e, n)| lonlat(&grid.frame, &EnuPoint::new(e, n, grid.plane_up)))
        .collect::<Result<Vec<_>>>()?;
    Ok(feature(
        json!({ "type": "Polygon", "coordinates": [ring] }),
        properties,
    ))
}

/// Andrew's monotone chain; counter-clockwise, without the closing point.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite corners"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Text raster: `key value` header lines, a `data` line, then one line of
/// space-separated values per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDump {
    pub header: Vec<(String, String)>,
    pub rows: Vec<Vec<f64>>,
}

pub const GRID_MAGIC: &str = "# shotloc-grid 1";

impl GridDump {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(GRID_MAGIC);
        out.push('\n');
        for (k, v) in &self.header {
            let _ = writeln!(out, "{k} {v}");
        }
        out.push_str("data\n");
        for row in &self.rows {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn parse(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let corrupt = |m: &str| Error::CorruptFile(format!("grid dump: {m}"));
        match lines.next() {
            Some(Ok(l)) if l == GRID_MAGIC => {}
            _ => return Err(corrupt("missing header line")),
        }
        let mut header = Vec::new();
        for line in lines.by_ref() {
            let line = line?;
            if line == "data" {
                break;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| corrupt("malformed header entry"))?;
            header.push((k.to_string(), v.to_string()));
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            let row = line
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| corrupt("bad value")))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(GridDump { header, rows })
    }
}

/// Heatmap scores; row 0 is the southernmost row.
pub fn heatmap_dump(h: &Heatmap) -> GridDump {
    let g = &h.grid;
    let o = g.frame.origin;
    let header = [
        ("kind", "heatmap".to_string()),
        ("origin_lat", o.lat.to_string()),
        ("origin_lon", o.lon.to_string()),
        ("origin_elev_m", o.elev.to_string()),
        ("min_east_m", g.min_east.to_string()),
        ("min_north_m", g.min_north.to_string()),
        ("max_east_m", g.max_east.to_string()),
        ("max_north_m", g.max_north.to_string()),
        ("cell_m", g.cell.to_string()),
        ("plane_up_m", g.plane_up.to_string()),
        ("cols", g.cols().to_string()),
        ("rows", g.rows().to_string()),
        ("row_order", "south_to_north".to_string()),
    ];
    GridDump {
        header: header
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        rows: h.scores.chunks(g.cols()).map(|r| r.to_vec()).collect(),
    }
}

/// Spectrogram in dB; one row per frame, one column per frequency bin.
pub fn spectrogram_dump(s: &Spectrogram) -> GridDump {
    let header = [
        ("kind", "spectrogram".to_string()),
        ("rate_hz", s.rate.to_string()),
        ("window", s.window.to_string()),
        ("hop", s.hop.to_string()),
        ("frame_step_s", (s.hop as f64 / s.rate as f64).to_string()),
        ("bin_step_hz", (s.rate as f64 / s.window as f64).to_string()),
        ("cols", s.bins().to_string()),
        ("rows", s.frames().to_string()),
        ("row_order", "time".to_string()),
    ];
    GridDump {
        header: header
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        rows: s.magnitudes_db.clone(),
    }
}

pub fn props(pairs: impl IntoIterator<Item = (&'static str, Value)>) -> Map<String, Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
