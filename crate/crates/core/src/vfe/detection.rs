use serde::{Deserialize, Serialize};

use super::boxes::{normalize_box, BoundingBox};
use crate::error::{Error, Result};

pub const DETECTION_INSTRUCTION: &str = "<img> Detect all objects in the image";

/// Stage-1 language-modeling example: the fixed detection instruction and a
/// target listing each object with its normalized corners.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionSample {
    pub instruction: String,
    pub target: String,
    pub image: String,
}

/// One `label: [x1, y1, x2, y2]` line per box, in input order.
pub fn detection_target(boxes: &[BoundingBox], width: u32, height: u32) -> Result<String> {
    if boxes.is_empty() {
        return Err(Error::validation("boxes", "at least one box is required"));
    }
    let lines = boxes
        .iter()
        .map(|b| Ok(format!("{}: {}", b.label, normalize_box(b, width, height)?.to_fixed3())))
        .collect::<Result<Vec<_>>>()?;
    Ok(lines.join("\n"))
}

pub fn build_detection_sample(
    boxes: &[BoundingBox],
    width: u32,
    height: u32,
    image: impl Into<String>,
) -> Result<DetectionSample> {
    Ok(DetectionSample {
        instruction: DETECTION_INSTRUCTION.to_string(),
        target: detection_target(boxes, width, height)?,
        image: image.into(),
    })
}
