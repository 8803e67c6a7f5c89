use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labeled object box in pixel coordinates. The pixel span is
/// `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
    pub label: String,
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32, label: impl Into<String>) -> Self {
        Self { x1, y1, x2, y2, label: label.into() }
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        let field = if self.label.is_empty() { "box".to_string() } else { format!("box[{}]", self.label) };
        if self.label.is_empty() {
            return Err(Error::validation(field, "label must be non-empty"));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::validation(
                field,
                format!("degenerate box [{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2),
            ));
        }
        if self.x2 > width || self.y2 > height {
            return Err(Error::validation(
                field,
                format!("box [{}, {}, {}, {}] exceeds image {}x{}", self.x1, self.y1, self.x2, self.y2, width, height),
            ));
        }
        Ok(())
    }
}

/// Box corners as fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormalizedBox {
    /// Maps back to pixel coordinates (not rounded).
    pub fn denormalize(&self, width: u32, height: u32) -> [f64; 4] {
        let (w, h) = (f64::from(width), f64::from(height));
        [self.x1 * w, self.y1 * h, self.x2 * w, self.y2 * h]
    }

    /// `[x1, y1, x2, y2]` with three fixed decimals.
    pub fn to_fixed3(&self) -> String {
        format!("[{:.3}, {:.3}, {:.3}, {:.3}]", self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn normalize_box(bbox: &BoundingBox, width: u32, height: u32) -> Result<NormalizedBox> {
    if width == 0 || height == 0 {
        return Err(Error::validation("image", format!("dimensions must be positive, got {width}x{height}")));
    }
    bbox.validate(width, height)?;
    let (w, h) = (f64::from(width), f64::from(height));
    Ok(NormalizedBox {
        x1: f64::from(bbox.x1) / w,
        y1: f64::from(bbox.y1) / h,
        x2: f64::from(bbox.x2) / w,
        y2: f64::from(bbox.y2) / h,
    })
}
