//! Spatial regions shared by annotations and detections.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel coordinates; `x2`/`y2` are exclusive edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxRegion {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxRegion { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn is_valid_within(&self, width: usize, height: usize) -> bool {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        finite
            && self.x1 < self.x2
            && self.y1 < self.y2
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= width as f64
            && self.y2 <= height as f64
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        BoxRegion::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    /// Tight box around the set pixels of a mask, or `None` for an empty mask.
    pub fn from_mask(mask: &Array2<bool>) -> Option<Self> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), &on) in mask.indexed_iter() {
            if !on {
                continue;
            }
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bounds.map(|(x0, y0, x1, y1)| {
            BoxRegion::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
        })
    }

    /// Filled binary mask: pixels whose centres fall inside the box.
    pub fn rasterize(&self, height: usize, width: usize) -> Array2<bool> {
        Array2::from_shape_fn((height, width), |(y, x)| {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            cx >= self.x1 && cx < self.x2 && cy >= self.y1 && cy < self.y2
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Box(BoxRegion),
    Mask(Array2<bool>),
}

impl Region {
    pub fn rasterize(&self, height: usize, width: usize) -> Array2<bool> {
        match self {
            Region::Box(b) => b.rasterize(height, width),
            Region::Mask(m) => m.clone(),
        }
    }
}
