//! Per-level supervision maps for the anchor-free heads.
//!
//! An instance assigned to level `l` marks its effective region POSITIVE in its
//! class channel, the rest of its ignoring region IGNORE, and its ignoring region
//! on levels `l - 1` and `l + 1` IGNORE as well. Where effective regions of two
//! instances meet on one level the smaller instance (image-space area, then lower
//! id) owns the cell for both classification and regression. IGNORE never replaces
//! POSITIVE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    encode_offsets, project_unchecked, scaled_region, BBox, PyramidSpec, RegionPixels, EFFECTIVE_SCALE,
    IGNORING_SCALE, OFFSET_NORMALIZER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CellState {
    Negative = 0,
    Positive = 1,
    Ignore = 2,
}

impl CellState {
    /// Gray level used by the PGM dump.
    pub fn gray(self) -> u8 {
        match self {
            CellState::Negative => 0,
            CellState::Ignore => 128,
            CellState::Positive => 255,
        }
    }
}

/// Region scales and offset normalizer used to build targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetParams {
    pub effective_scale: f64,
    pub ignoring_scale: f64,
    pub normalizer: f64,
}

impl Default for TargetParams {
    fn default() -> Self {
        Self {
            effective_scale: EFFECTIVE_SCALE,
            ignoring_scale: IGNORING_SCALE,
            normalizer: OFFSET_NORMALIZER,
        }
    }
}

/// One pyramid level assigned to each instance, indexed by instance id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment(pub Vec<u32>);

impl Assignment {
    pub fn level(&self, instance: usize) -> u32 {
        self.0[instance]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `K x H x W` classification supervision of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargetMap {
    pub level: u32,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub cells: Vec<CellState>,
}

impl ClassTargetMap {
    fn negative(level: u32, num_classes: usize, height: usize, width: usize) -> Self {
        Self {
            level,
            num_classes,
            height,
            width,
            cells: vec![CellState::Negative; num_classes * height * width],
        }
    }

    #[inline]
    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.height + i) * self.width + j
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> CellState {
        self.cells[self.index(k, i, j)]
    }

    pub fn count(&self, state: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == state).count()
    }

    /// Binary PGM (P5) of channel `k`: NEGATIVE 0, IGNORE 128, POSITIVE 255.
    pub fn to_pgm(&self, k: usize) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.height * self.width;
        out.extend(self.cells[k * plane..(k + 1) * plane].iter().map(|c| c.gray()));
        out
    }
}

/// `4 x H x W` regression supervision of one level plus its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTargetMap {
    pub level: u32,
    pub height: usize,
    pub width: usize,
    /// Channel-major `(top, left, bottom, right)` planes, already divided by `S`.
    pub offsets: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Sidecar describing a raw offsets dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetDumpHeader {
    pub level: u32,
    pub shape: [usize; 3],
    #[serde(rename = "S")]
    pub normalizer: f64,
}

impl RegressionTargetMap {
    fn empty(level: u32, height: usize, width: usize) -> Self {
        Self {
            level,
            height,
            width,
            offsets: vec![0.0; 4 * height * width],
            mask: vec![false; height * width],
        }
    }

    pub fn offset(&self, i: usize, j: usize) -> [f64; 4] {
        let plane = self.height * self.width;
        let p = i * self.width + j;
        [
            self.offsets[p],
            self.offsets[plane + p],
            self.offsets[2 * plane + p],
            self.offsets[3 * plane + p],
        ]
    }

    fn set(&mut self, i: usize, j: usize, v: [f64; 4]) {
        let plane = self.height * self.width;
        let p = i * self.width + j;
        for (c, x) in v.into_iter().enumerate() {
            self.offsets[c * plane + p] = x;
        }
        self.mask[p] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Little-endian f32 payload of the offset planes.
    pub fn offsets_le_bytes(&self) -> Vec<u8> {
        self.offsets.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    }

    pub fn dump_header(&self, normalizer: f64) -> OffsetDumpHeader {
        OffsetDumpHeader {
            level: self.level,
            shape: [4, self.height, self.width],
            normalizer,
        }
    }
}

/// Both kinds of maps for every pyramid level, in level order.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub classes: Vec<ClassTargetMap>,
    pub regression: Vec<RegressionTargetMap>,
}

fn validate(instances: &[BBox], assignment: &Assignment, pyramid: &PyramidSpec, num_classes: usize) -> Result<()> {
    if assignment.len() != instances.len() {
        return Err(Error::arg(format!(
            "assignment covers {} instances but {} were given",
            assignment.len(),
            instances.len()
        )));
    }
    for (n, b) in instances.iter().enumerate() {
        pyramid.check_level(assignment.level(n) as i64)?;
        if b.class_id >= num_classes {
            return Err(Error::arg(format!("instance {n} has class {} >= K = {num_classes}", b.class_id)));
        }
    }
    Ok(())
}

pub(crate) fn region_pixels(b: &BBox, level: u32, scale: f64, pyramid: &PyramidSpec) -> RegionPixels {
    let (h, w) = pyramid.dims(level);
    let pb = project_unchecked(b, level);
    scaled_region(&pb, scale)
        .expect("region scales are validated positive")
        .rasterize(h, w)
}

/// Instance ids ordered from highest to lowest priority.
pub(crate) fn priority_order(instances: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[a].area().total_cmp(&instances[b].area()).then(a.cmp(&b)));
    order
}

/// Owner instance of every effective-region cell, per level.
fn ownership(
    instances: &[BBox],
    assignment: &Assignment,
    pyramid: &PyramidSpec,
    params: &TargetParams,
) -> Vec<Vec<Option<usize>>> {
    let mut owners: Vec<Vec<Option<usize>>> = pyramid
        .levels()
        .map(|l| {
            let (h, w) = pyramid.dims(l);
            vec![None; h * w]
        })
        .collect();
    for n in priority_order(instances) {
        let level = assignment.level(n);
        let (_, width) = pyramid.dims(level);
        let grid = &mut owners[pyramid.level_index(level)];
        for (i, j) in region_pixels(&instances[n], level, params.effective_scale, pyramid).iter() {
            grid[i * width + j].get_or_insert(n);
        }
    }
    owners
}

fn check_params(params: &TargetParams) -> Result<()> {
    if !(params.effective_scale > 0.0 && params.ignoring_scale > 0.0 && params.normalizer > 0.0) {
        return Err(Error::arg("region scales and normalizer must be positive"));
    }
    Ok(())
}

pub fn generate_class_targets(
    instances: &[BBox],
    assignment: &Assignment,
    pyramid: &PyramidSpec,
    num_classes: usize,
    params: &TargetParams,
) -> Result<Vec<ClassTargetMap>> {
    Ok(generate_targets(instances, assignment, pyramid, num_classes, params)?.classes)
}

pub fn generate_regression_targets(
    instances: &[BBox],
    assignment: &Assignment,
    pyramid: &PyramidSpec,
    params: &TargetParams,
) -> Result<Vec<RegressionTargetMap>> {
    let num_classes = instances.iter().map(|b| b.class_id + 1).max().unwrap_or(1);
    Ok(generate_targets(instances, assignment, pyramid, num_classes, params)?.regression)
}

/// Classification and regression maps sharing one ownership resolution.
pub fn generate_targets(
    instances: &[BBox],
    assignment: &Assignment,
    pyramid: &PyramidSpec,
    num_classes: usize,
    params: &TargetParams,
) -> Result<LevelTargets> {
    check_params(params)?;
    validate(instances, assignment, pyramid, num_classes)?;
    let owners = ownership(instances, assignment, pyramid, params);

    let mut classes = Vec::with_capacity(pyramid.num_levels());
    let mut regression = Vec::with_capacity(pyramid.num_levels());
    for (level, grid) in pyramid.levels().zip(&owners) {
        let (h, w) = pyramid.dims(level);
        let mut cls = ClassTargetMap::negative(level, num_classes, h, w);
        let mut reg = RegressionTargetMap::empty(level, h, w);
        for i in 0..h {
            for j in 0..w {
                if let Some(n) = grid[i * w + j] {
                    let b = &instances[n];
                    let idx = cls.index(b.class_id, i, j);
                    cls.cells[idx] = CellState::Positive;
                    // Only the single-pixel fallback can sit outside the projected box;
                    // clamping gives the smallest box holding both the pixel and the instance.
                    let pb = project_unchecked(b, level);
                    let o = encode_offsets(&pb, i, j, params.normalizer).clamped_non_negative();
                    reg.set(i, j, o.to_array());
                }
            }
        }
        classes.push(cls);
        regression.push(reg);
    }

    let mark_ignore = |map: &mut ClassTargetMap, k: usize, px: &RegionPixels| {
        for (i, j) in px.iter() {
            let idx = map.index(k, i, j);
            if map.cells[idx] == CellState::Negative {
                map.cells[idx] = CellState::Ignore;
            }
        }
    };
    for (n, b) in instances.iter().enumerate() {
        let level = assignment.level(n) as i64;
        for lv in [level - 1, level, level + 1] {
            if !pyramid.contains(lv) {
                continue;
            }
            let lv = lv as u32;
            let map = &mut classes[pyramid.level_index(lv)];
            mark_ignore(map, b.class_id, &region_pixels(b, lv, params.ignoring_scale, pyramid));
            if lv as i64 == level {
                // Effective cells lost to a smaller instance of another class.
                mark_ignore(map, b.class_id, &region_pixels(b, lv, params.effective_scale, pyramid));
            }
        }
    }

    Ok(LevelTargets { classes, regression })
}
