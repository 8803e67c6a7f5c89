//! Visual feature extraction: marker rendering, box normalization, the two
//! visual branches with their projections, and stage-1 detection samples.

mod backbone;
mod boxes;
mod detection;
mod markers;

pub use backbone::{
    extract_features, BackboneConfig, BackboneMode, Branch, ToyBackbone, VfeConfig, VisualFeatureExtractor,
    VisualFeatures,
};
pub use boxes::{normalize_box, BoundingBox, NormalizedBox};
pub use detection::{build_detection_sample, detection_target, DetectionSample, DETECTION_INSTRUCTION};
pub use markers::{
    check_resolution, label_pixels, marked_pair, on_outline, palette_color, render_markers, MarkedImage, Resolution,
    GLYPH_SIZE, OUTLINE_WIDTH, PALETTE,
};
