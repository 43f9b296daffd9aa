//! Region providers: objectness-filtered box regions and grid regions.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Default objectness cut for proposals.
pub const OBJECTNESS_THRESHOLD: f64 = 0.7;
/// Default cap on box regions per image.
pub const BOX_REGION_CAP: usize = 100;
/// Default grid side; `G·G` grid regions per image.
pub const GRID_SIZE: usize = 10;

/// Axis-aligned box in image coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidBox(self.x1, self.y1, self.x2, self.y2));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Bbox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clamps into `[0, width] × [0, height]`; `None` if nothing remains.
    pub fn clamp(&self, width: f64, height: f64) -> Option<Bbox> {
        Bbox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .ok()
    }
}

/// A scored candidate box with its raw (pre-encoder) feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: Bbox,
    pub objectness: f64,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxRegion {
    pub bbox: Bbox,
    pub objectness: f64,
    pub feature: Vec<f64>,
    /// Position of the source proposal in its input list.
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRegion {
    pub row: usize,
    pub col: usize,
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Box,
    Grid,
}

impl RegionKind {
    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Box => "box",
            RegionKind::Grid => "grid",
        }
    }
}

/// Both region kinds of one image. The two kinds are kept apart: losses are
/// applied per kind.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    pub image_id: u64,
    pub boxes: Vec<BoxRegion>,
    pub grid: Vec<GridRegion>,
}

impl RegionSet {
    pub fn feature_dim(&self) -> Option<usize> {
        self.boxes
            .first()
            .map(|b| b.feature.len())
            .or_else(|| self.grid.first().map(|g| g.feature.len()))
    }

    pub fn len(&self, kind: RegionKind) -> usize {
        match kind {
            RegionKind::Box => self.boxes.len(),
            RegionKind::Grid => self.grid.len(),
        }
    }

    /// Feature rows of one kind stacked into a matrix, `None` when empty.
    pub fn features(&self, kind: RegionKind) -> Option<Tensor> {
        let rows: Vec<&[f64]> = match kind {
            RegionKind::Box => self.boxes.iter().map(|b| b.feature.as_slice()).collect(),
            RegionKind::Grid => self.grid.iter().map(|g| g.feature.as_slice()).collect(),
        };
        let cols = rows.first()?.len();
        let data = rows.concat();
        Some(Tensor::matrix(rows.len(), cols, data))
    }
}

/// Keeps proposals scoring strictly above `threshold`, highest score first,
/// truncated to `cap`. Ties keep input order.
pub fn select_box_regions(proposals: &[Proposal], threshold: f64, cap: usize) -> Vec<BoxRegion> {
    assert!(cap >= 1, "box-region cap must be at least 1");
    let mut keep: Vec<usize> = (0..proposals.len())
        .filter(|&i| proposals[i].objectness > threshold)
        .collect();
    // stable sort keeps index order among equal scores
    keep.sort_by(|&a, &b| proposals[b].objectness.total_cmp(&proposals[a].objectness));
    keep.truncate(cap);
    keep.into_iter()
        .map(|i| {
            let p = &proposals[i];
            BoxRegion {
                bbox: p.bbox,
                objectness: p.objectness,
                feature: p.feature.clone(),
                source: i,
            }
        })
        .collect()
}

/// Splits a `G×G×F` feature map into `G·G` regions in row-major order.
pub fn make_grid_regions(feature_map: &Tensor) -> Result<Vec<GridRegion>> {
    let shape = feature_map.shape();
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch(format!(
            "grid feature map must be GxGxF, got {shape:?}"
        )));
    }
    let (g, f) = (shape[0], shape[2]);
    Ok((0..g * g)
        .map(|cell| GridRegion {
            row: cell / g,
            col: cell % g,
            feature: feature_map.data()[cell * f..(cell + 1) * f].to_vec(),
        })
        .collect())
}
