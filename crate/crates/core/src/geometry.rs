//! Premise bounds, hex-packed zone placement and point coverage.
//!
//! Zones are detection circles. The hexagonal lattice only decides where the
//! circle centers go; choosing `radius > pitch / sqrt(3)` makes neighbouring
//! circles overlap so the interior has no blind spots.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

fn invalid(msg: impl Into<String>) -> GeometryError {
    GeometryError::InvalidGeometry(msg.into())
}

/// A position in meters.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub zone_id: String,
    pub center: Point,
    pub radius: f64,
    pub tags: BTreeSet<String>,
    pub fvu_id: String,
}

impl Zone {
    /// Boundary counts as inside.
    pub fn covers(&self, p: &Point) -> bool {
        self.center.distance(p) <= self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PremiseLayout {
    pub premise_id: String,
    pub width: f64,
    pub height: f64,
    pub zones: Vec<Zone>,
    pub console_id: String,
}

impl PremiseLayout {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.width > 0.0 && self.width.is_finite()) || !(self.height > 0.0 && self.height.is_finite()) {
            return Err(invalid("premise width and height must be positive"));
        }
        let mut ids = BTreeSet::new();
        let mut fvus = BTreeSet::new();
        for z in &self.zones {
            if !(z.radius > 0.0 && z.radius.is_finite()) {
                return Err(invalid(format!("zone {} radius must be positive", z.zone_id)));
            }
            if !z.center.is_finite() || !self.contains(&z.center) {
                return Err(invalid(format!("zone {} center outside premise bounds", z.zone_id)));
            }
            if !ids.insert(z.zone_id.as_str()) {
                return Err(invalid(format!("duplicate zone id {}", z.zone_id)));
            }
            if !fvus.insert(z.fvu_id.as_str()) {
                return Err(invalid(format!("fvu {} assigned to more than one zone", z.fvu_id)));
            }
        }
        Ok(())
    }

    /// Whether `p` lies within the premise rectangle (edges included).
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }

    pub fn zone(&self, zone_id: &str) -> Option<&Zone> {
        self.zones.iter().find(|z| z.zone_id == zone_id)
    }
}

/// Place zone centers on a hexagonal lattice over `[0,width]×[0,height]`.
///
/// Row `r` sits at `y = r·pitch·√3/2`; odd rows are shifted right by
/// `pitch/2`. Zone ids are `z{row}-{col}`, FVU ids `fvu-z{row}-{col}`.
pub fn hex_layout(
    width: f64,
    height: f64,
    pitch: f64,
    radius: f64,
    tags: &BTreeSet<String>,
) -> Result<Vec<Zone>, GeometryError> {
    for (name, v) in [
        ("width", width),
        ("height", height),
        ("pitch", pitch),
        ("radius", radius),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(invalid(format!("{name} must be positive, got {v}")));
        }
    }
    let row_spacing = pitch * 3f64.sqrt() / 2.0;
    let mut zones = Vec::new();
    let mut row = 0u32;
    loop {
        let y = f64::from(row) * row_spacing;
        if y > height {
            break;
        }
        let offset = if row % 2 == 1 { pitch / 2.0 } else { 0.0 };
        let mut col = 0u32;
        loop {
            let x = f64::from(col) * pitch + offset;
            if x > width {
                break;
            }
            let zone_id = format!("z{row}-{col}");
            zones.push(Zone {
                fvu_id: format!("fvu-{zone_id}"),
                zone_id,
                center: Point::new(x, y),
                radius,
                tags: tags.clone(),
            });
            col += 1;
        }
        row += 1;
    }
    Ok(zones)
}

/// Zones whose circle contains `p`, sorted by zone id.
pub fn zones_covering<'a>(layout: &'a PremiseLayout, p: &Point) -> Vec<&'a Zone> {
    let mut out: Vec<&Zone> = layout.zones.iter().filter(|z| z.covers(p)).collect();
    out.sort_by(|a, b| a.zone_id.cmp(&b.zone_id));
    out
}

/// Grid sample points `(i·step, j·step)` for `i·step ≤ width`, `j·step ≤ height`.
pub fn sample_grid(width: f64, height: f64, step: f64) -> impl Iterator<Item = Point> {
    let nx = (width / step).floor() as u64;
    let ny = (height / step).floor() as u64;
    (0..=ny).flat_map(move |j| (0..=nx).map(move |i| Point::new(i as f64 * step, j as f64 * step)))
}

/// Fraction of grid sample points covered by at least one zone.
pub fn coverage_fraction(layout: &PremiseLayout, grid_step: f64) -> Result<f64, GeometryError> {
    Ok(coverage_stats(layout, grid_step)?.fraction())
}

/// Detailed grid coverage numbers, used by the CLI's gap diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageStats {
    pub samples: u64,
    pub covered: u64,
    /// Largest distance from an uncovered sample to the nearest zone edge.
    pub max_gap: f64,
    pub worst_point: Option<Point>,
}

impl CoverageStats {
    pub fn fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.covered as f64 / self.samples as f64
        }
    }
}

pub fn coverage_stats(layout: &PremiseLayout, grid_step: f64) -> Result<CoverageStats, GeometryError> {
    if !(grid_step > 0.0 && grid_step.is_finite()) {
        return Err(invalid(format!("grid_step must be positive, got {grid_step}")));
    }
    let mut stats = CoverageStats {
        samples: 0,
        covered: 0,
        max_gap: 0.0,
        worst_point: None,
    };
    for p in sample_grid(layout.width, layout.height, grid_step) {
        stats.samples += 1;
        if layout.zones.iter().any(|z| z.covers(&p)) {
            stats.covered += 1;
            continue;
        }
        let gap = layout
            .zones
            .iter()
            .map(|z| z.center.distance(&p) - z.radius)
            .fold(f64::INFINITY, f64::min);
        if stats.worst_point.is_none() || gap > stats.max_gap {
            stats.max_gap = gap;
            stats.worst_point = Some(p);
        }
    }
    if layout.zones.is_empty() {
        stats.max_gap = f64::INFINITY;
    }
    Ok(stats)
}
