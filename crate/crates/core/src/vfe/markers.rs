//! Visual markers: box outlines plus label text burnt into the image.

use font8x8::legacy::BASIC_LEGACY;
use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use crate::error::{Error, Result};

pub const OUTLINE_WIDTH: u32 = 3;
pub const GLYPH_SIZE: u32 = 8;

/// Outline/label colors, cycled by object index. None of them is black.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    /// Whatever size the source image had.
    Source,
    /// 1024 x 1024, consumed by the region branch.
    High,
    /// 224 x 224, consumed by the global branch.
    Low,
}

impl Resolution {
    pub fn side(self) -> Option<u32> {
        match self {
            Resolution::Source => None,
            Resolution::High => Some(1024),
            Resolution::Low => Some(224),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkedImage {
    pub pixels: RgbImage,
    pub resolution: Resolution,
    pub markers: Vec<BoundingBox>,
}

impl MarkedImage {
    /// Resamples to a fixed resolution with a triangle filter.
    pub fn resized(&self, resolution: Resolution) -> MarkedImage {
        let pixels = match resolution.side() {
            Some(side) => imageops::resize(&self.pixels, side, side, imageops::FilterType::Triangle),
            None => self.pixels.clone(),
        };
        MarkedImage { pixels, resolution, markers: self.markers.clone() }
    }
}

pub fn palette_color(index: usize) -> Rgb<u8> {
    Rgb(PALETTE[index % PALETTE.len()])
}

/// Returns true if `(x, y)` lies on the outline band of `b`.
pub fn on_outline(b: &BoundingBox, x: u32, y: u32) -> bool {
    let inside = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
    inside
        && (x < b.x1 + OUTLINE_WIDTH
            || x + OUTLINE_WIDTH >= b.x2
            || y < b.y1 + OUTLINE_WIDTH
            || y + OUTLINE_WIDTH >= b.y2)
}

/// Pixels lit by the label of `b`: 8x8 glyphs starting one pixel inside the
/// outline's top-left corner, clipped to the box interior.
pub fn label_pixels(b: &BoundingBox) -> Vec<(u32, u32)> {
    let left = b.x1 + OUTLINE_WIDTH + 1;
    let top = b.y1 + OUTLINE_WIDTH + 1;
    let right = b.x2.saturating_sub(OUTLINE_WIDTH);
    let bottom = b.y2.saturating_sub(OUTLINE_WIDTH);
    let mut out = Vec::new();
    for (i, ch) in b.label.chars().enumerate() {
        let code = if ch.is_ascii() { ch as usize } else { '?' as usize };
        let glyph = BASIC_LEGACY[code];
        let gx = left + i as u32 * GLYPH_SIZE;
        if gx >= right {
            break;
        }
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH_SIZE {
                if bits & (1 << col) == 0 {
                    continue;
                }
                let (x, y) = (gx + col, top + row as u32);
                if x < right && y < bottom {
                    out.push((x, y));
                }
            }
        }
    }
    out
}

/// Draws every box outline and label onto a copy of `image`.
pub fn render_markers(image: &RgbImage, boxes: &[BoundingBox]) -> Result<MarkedImage> {
    let (w, h) = image.dimensions();
    for b in boxes {
        b.validate(w, h)?;
    }
    let mut pixels = image.clone();
    for (i, b) in boxes.iter().enumerate() {
        let color = palette_color(i);
        for y in b.y1..b.y2 {
            for x in b.x1..b.x2 {
                if on_outline(b, x, y) {
                    pixels.put_pixel(x, y, color);
                }
            }
        }
        for (x, y) in label_pixels(b) {
            pixels.put_pixel(x, y, color);
        }
    }
    Ok(MarkedImage { pixels, resolution: Resolution::Source, markers: boxes.to_vec() })
}

/// Marks the image and produces the high- and low-resolution variants.
pub fn marked_pair(image: &RgbImage, boxes: &[BoundingBox]) -> Result<(MarkedImage, MarkedImage)> {
    let marked = render_markers(image, boxes)?;
    Ok((marked.resized(Resolution::High), marked.resized(Resolution::Low)))
}

pub fn check_resolution(img: &MarkedImage, expected: Resolution) -> Result<()> {
    let side = expected.side();
    let dims = img.pixels.dimensions();
    if img.resolution != expected || side.is_some_and(|s| dims != (s, s)) {
        return Err(Error::validation(
            "image.resolution",
            format!("expected {expected:?}, got {:?} with {}x{} pixels", img.resolution, dims.0, dims.1),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn black(w: u32, h: u32) -> RgbImage {
        RgbImage::new(w, h)
    }

    #[test]
    fn empty_box_list_is_identity() {
        let mut img = black(20, 10);
        img.put_pixel(3, 4, Rgb([1, 2, 3]));
        let out = render_markers(&img, &[]).unwrap();
        assert_eq!(out.pixels, img);
        assert!(out.markers.is_empty());
    }

    #[test]
    fn diff_is_exactly_outline_and_glyphs() {
        let img = black(100, 100);
        let b = BoundingBox::new(10, 10, 50, 50, "person0");
        let out = render_markers(&img, std::slice::from_ref(&b)).unwrap();

        // Oracle: outline band by direct geometry, glyph bits straight from the font table.
        let mut expected = HashSet::new();
        for y in 10..50u32 {
            for x in 10..50u32 {
                if !(13..47).contains(&x) || !(13..47).contains(&y) {
                    expected.insert((x, y));
                }
            }
        }
        for (i, ch) in "person0".chars().enumerate() {
            let glyph = BASIC_LEGACY[ch as usize];
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8u32 {
                    let x = 14 + 8 * i as u32 + col;
                    let y = 14 + row as u32;
                    if bits & (1 << col) != 0 && x < 47 && y < 47 {
                        expected.insert((x, y));
                    }
                }
            }
        }
        let mut changed = HashSet::new();
        for (x, y, p) in out.pixels.enumerate_pixels() {
            if p != img.get_pixel(x, y) {
                changed.insert((x, y));
            }
        }
        assert!(!expected.is_empty());
        assert_eq!(changed, expected);
    }

    #[test]
    fn input_untouched_and_deterministic() {
        let img = black(64, 64);
        let boxes = vec![BoundingBox::new(2, 2, 40, 30, "person0"), BoundingBox::new(20, 20, 64, 64, "chair1")];
        let a = render_markers(&img, &boxes).unwrap();
        let b = render_markers(&img, &boxes).unwrap();
        assert_eq!(a, b);
        assert_eq!(img, black(64, 64));
        assert_eq!(*a.pixels.get_pixel(2, 2), Rgb(PALETTE[0]));
        assert_eq!(*a.pixels.get_pixel(63, 63), Rgb(PALETTE[1]));
    }

    #[test]
    fn degenerate_box_rejected() {
        let err = render_markers(&black(10, 10), &[BoundingBox::new(3, 1, 3, 5, "cup0")]).unwrap_err();
        assert_eq!(err.field(), Some("box[cup0]"));
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(render_markers(&black(10, 10), &[BoundingBox::new(0, 0, 11, 5, "a")]).is_err());
    }

    #[test]
    fn resolution_variants() {
        let (hi, lo) = marked_pair(&black(30, 20), &[BoundingBox::new(0, 0, 10, 10, "a")]).unwrap();
        assert_eq!(hi.pixels.dimensions(), (1024, 1024));
        assert_eq!(lo.pixels.dimensions(), (224, 224));
        check_resolution(&hi, Resolution::High).unwrap();
        assert!(check_resolution(&lo, Resolution::High).is_err());
    }
}
