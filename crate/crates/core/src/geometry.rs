//! Coordinate algebra of the feature pyramid.
//!
//! Boxes live in image pixels as `[x, y, w, h]` with `(x, y)` the box center.
//! Projecting onto level `l` divides every field by `2^l`. Feature-map pixel
//! `(i, j)` is the point at row `i`, column `j` of that level with no half-pixel
//! offset, so encoding a box as boundary distances and decoding it again is
//! exact up to floating rounding.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale of the effective (positive) region relative to the projected box.
pub const EFFECTIVE_SCALE: f64 = 0.2;
/// Scale of the ignoring region relative to the projected box.
pub const IGNORING_SCALE: f64 = 0.5;
/// Normalizer applied to boundary distances before regression.
pub const OFFSET_NORMALIZER: f64 = 4.0;

/// An instance box in image pixels, center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(class_id: usize, x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::arg(format!("box must have finite coordinates and positive size, got [{x}, {y}, {w}, {h}]")));
        }
        Ok(Self { class_id, x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> Corners {
        Corners {
            top: self.y - self.h / 2.0,
            left: self.x - self.w / 2.0,
            bottom: self.y + self.h / 2.0,
            right: self.x + self.w / 2.0,
        }
    }

    /// Mirror around the vertical axis of an image `image_width` pixels wide.
    pub fn flipped_horizontally(&self, image_width: f64) -> Self {
        Self {
            x: image_width - self.x,
            ..*self
        }
    }
}

/// Axis-aligned box as `(top, left, bottom, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl Corners {
    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    /// A box is valid when it has strictly positive extent in both axes.
    pub fn is_valid(&self) -> bool {
        self.bottom > self.top && self.right > self.left
    }

    pub fn area(&self) -> f64 {
        self.height().max(0.0) * self.width().max(0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            top: self.top * factor,
            left: self.left * factor,
            bottom: self.bottom * factor,
            right: self.right * factor,
        }
    }

    pub fn clipped(&self, height: f64, width: f64) -> Self {
        Self {
            top: self.top.clamp(0.0, height),
            left: self.left.clamp(0.0, width),
            bottom: self.bottom.clamp(0.0, height),
            right: self.right.clamp(0.0, width),
        }
    }

    pub fn iou(&self, other: &Corners) -> f64 {
        let ih = (self.bottom.min(other.bottom) - self.top.max(other.top)).max(0.0);
        let iw = (self.right.min(other.right) - self.left.max(other.left)).max(0.0);
        let inter = ih * iw;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.top, self.left, self.bottom, self.right]
    }
}

/// Range of pyramid levels plus the input image size they are derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub min_level: u32,
    pub max_level: u32,
    pub image_height: usize,
    pub image_width: usize,
}

impl PyramidSpec {
    pub fn new(min_level: u32, max_level: u32, image_height: usize, image_width: usize) -> Result<Self> {
        if min_level > max_level {
            return Err(Error::arg(format!("min level {min_level} exceeds max level {max_level}")));
        }
        if max_level > 16 {
            return Err(Error::arg(format!("max level {max_level} is unreasonably deep")));
        }
        if image_height == 0 || image_width == 0 {
            return Err(Error::arg("image dimensions must be positive"));
        }
        Ok(Self {
            min_level,
            max_level,
            image_height,
            image_width,
        })
    }

    /// The P3-P7 pyramid for an image of the given size.
    pub fn standard(image_height: usize, image_width: usize) -> Self {
        Self {
            min_level: 3,
            max_level: 7,
            image_height,
            image_width,
        }
    }

    pub fn levels(&self) -> impl Iterator<Item = u32> + Clone {
        self.min_level..=self.max_level
    }

    pub fn num_levels(&self) -> usize {
        (self.max_level - self.min_level + 1) as usize
    }

    pub fn contains(&self, level: i64) -> bool {
        level >= self.min_level as i64 && level <= self.max_level as i64
    }

    pub fn check_level(&self, level: i64) -> Result<u32> {
        if self.contains(level) {
            Ok(level as u32)
        } else {
            Err(Error::LevelOutOfRange {
                level: level as i32,
                min: self.min_level,
                max: self.max_level,
            })
        }
    }

    pub fn clamp_level(&self, level: i64) -> u32 {
        level.clamp(self.min_level as i64, self.max_level as i64) as u32
    }

    /// Index of `level` in `levels()`.
    pub fn level_index(&self, level: u32) -> usize {
        (level - self.min_level) as usize
    }

    pub fn stride(level: u32) -> f64 {
        (1u64 << level) as f64
    }

    /// `(H_l, W_l)` with `H_l = ceil(H / 2^l)`.
    pub fn dims(&self, level: u32) -> (usize, usize) {
        let s = 1usize << level;
        (self.image_height.div_ceil(s), self.image_width.div_ceil(s))
    }
}

/// A box expressed in feature-map units of one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedBox {
    pub level: u32,
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl ProjectedBox {
    pub fn corners(&self) -> Corners {
        Corners {
            top: self.y - self.h / 2.0,
            left: self.x - self.w / 2.0,
            bottom: self.y + self.h / 2.0,
            right: self.x + self.w / 2.0,
        }
    }
}

/// A centered sub-region of a projected box, such as the effective or ignoring box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionBox {
    pub level: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub scale: f64,
}

/// Rectangle of integer pixels covered by a [`RegionBox`] on a concrete map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPixels {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    /// True when the closed-interval rule covered nothing and the pixel nearest the
    /// center was substituted.
    pub fallback: bool,
}

impl RegionPixels {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows.contains(&i) && self.cols.contains(&j)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.clone().flat_map(move |i| self.cols.clone().map(move |j| (i, j)))
    }
}

fn closed_span(center: f64, extent: f64, len: usize) -> Range<usize> {
    let lo = (center - extent / 2.0).ceil().max(0.0);
    let hi = (center + extent / 2.0).floor();
    if hi < lo || len == 0 {
        return 0..0;
    }
    let hi = hi.min(len as f64 - 1.0);
    if hi < lo {
        return 0..0;
    }
    lo as usize..hi as usize + 1
}

impl RegionBox {
    /// Pixels `(i, j)` with `y - h/2 <= i <= y + h/2` and `x - w/2 <= j <= x + w/2`,
    /// restricted to a `height x width` map. An empty result degenerates to the single
    /// in-map pixel nearest the center.
    pub fn rasterize(&self, height: usize, width: usize) -> RegionPixels {
        assert!(height > 0 && width > 0, "cannot rasterize onto an empty map");
        let rows = closed_span(self.y, self.h, height);
        let cols = closed_span(self.x, self.w, width);
        if !rows.is_empty() && !cols.is_empty() {
            return RegionPixels {
                rows,
                cols,
                fallback: false,
            };
        }
        let i = (self.y.round().max(0.0) as usize).min(height - 1);
        let j = (self.x.round().max(0.0) as usize).min(width - 1);
        RegionPixels {
            rows: i..i + 1,
            cols: j..j + 1,
            fallback: true,
        }
    }
}

/// Boundary distances `(top, left, bottom, right)` divided by the normalizer `S`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OffsetVector {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl OffsetVector {
    pub fn new(top: f64, left: f64, bottom: f64, right: f64) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.top, self.left, self.bottom, self.right]
    }

    pub fn clamped_non_negative(&self) -> Self {
        Self::new(self.top.max(0.0), self.left.max(0.0), self.bottom.max(0.0), self.right.max(0.0))
    }
}

pub fn project_box(b: &BBox, level: u32, pyramid: &PyramidSpec) -> Result<ProjectedBox> {
    pyramid.check_level(level as i64)?;
    Ok(project_unchecked(b, level))
}

pub(crate) fn project_unchecked(b: &BBox, level: u32) -> ProjectedBox {
    let s = PyramidSpec::stride(level);
    ProjectedBox {
        level,
        class_id: b.class_id,
        x: b.x / s,
        y: b.y / s,
        w: b.w / s,
        h: b.h / s,
    }
}

pub fn scaled_region(pb: &ProjectedBox, scale: f64) -> Result<RegionBox> {
    if !(scale > 0.0) {
        return Err(Error::arg(format!("region scale must be positive, got {scale}")));
    }
    Ok(RegionBox {
        level: pb.level,
        x: pb.x,
        y: pb.y,
        w: pb.w * scale,
        h: pb.h * scale,
        scale,
    })
}

/// Distances from pixel `(i, j)` (row, column) to the four boundaries of `pb`,
/// divided by `normalizer`. Components are non-negative whenever the pixel lies
/// inside the box.
pub fn encode_offsets(pb: &ProjectedBox, i: usize, j: usize, normalizer: f64) -> OffsetVector {
    let (i, j) = (i as f64, j as f64);
    OffsetVector {
        top: (i - (pb.y - pb.h / 2.0)) / normalizer,
        left: (j - (pb.x - pb.w / 2.0)) / normalizer,
        bottom: ((pb.y + pb.h / 2.0) - i) / normalizer,
        right: ((pb.x + pb.w / 2.0) - j) / normalizer,
    }
}

/// Corners of the box predicted at pixel `(i, j)` of `level`, in feature-map units.
pub fn decode_projected(i: usize, j: usize, offsets: &OffsetVector, normalizer: f64) -> Corners {
    let (i, j) = (i as f64, j as f64);
    Corners {
        top: i - normalizer * offsets.top,
        left: j - normalizer * offsets.left,
        bottom: i + normalizer * offsets.bottom,
        right: j + normalizer * offsets.right,
    }
}

/// Image-plane corners of the box predicted at pixel `(i, j)` of `level`. Check
/// [`Corners::is_valid`] before using the result; zero offsets decode to an
/// empty box.
pub fn decode_box(i: usize, j: usize, offsets: &OffsetVector, normalizer: f64, level: u32) -> Corners {
    decode_projected(i, j, offsets, normalizer).scaled(PyramidSpec::stride(level))
}
