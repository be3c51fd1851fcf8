//! A minimal RetinaNet-style anchor-based branch: anchor layout, IoU matching,
//! the center/size box parameterization, and its loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Corners, PyramidSpec};
use crate::losses::{focal_loss, FocalParams, LossValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    /// Base anchor side on level `l` is `base_multiplier * 2^l` pixels.
    pub base_multiplier: f64,
    pub scales: Vec<f64>,
    /// Height over width.
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            base_multiplier: 4.0,
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorSpec {
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_location() == 0 {
            return Err(Error::arg("anchor spec needs at least one scale and one aspect ratio"));
        }
        if !(self.base_multiplier > 0.0) || self.scales.iter().chain(&self.aspect_ratios).any(|&v| !(v > 0.0)) {
            return Err(Error::arg("anchor sizes and ratios must be positive"));
        }
        Ok(())
    }

    /// `(height, width)` of each anchor shape on `level`, scale-major.
    pub fn shapes(&self, level: u32) -> Vec<(f64, f64)> {
        let base = self.base_multiplier * PyramidSpec::stride(level);
        let mut out = Vec::with_capacity(self.per_location());
        for &s in &self.scales {
            for &r in &self.aspect_ratios {
                let size = base * s;
                out.push((size * r.sqrt(), size / r.sqrt()));
            }
        }
        out
    }
}

/// All anchors of one level, indexed `(i * W + j) * A + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    pub level: u32,
    pub height: usize,
    pub width: usize,
    pub per_location: usize,
    pub boxes: Vec<Corners>,
}

pub fn generate_anchors(pyramid: &PyramidSpec, spec: &AnchorSpec) -> Result<Vec<LevelAnchors>> {
    spec.validate()?;
    Ok(pyramid
        .levels()
        .map(|level| {
            let (h, w) = pyramid.dims(level);
            let stride = PyramidSpec::stride(level);
            let shapes = spec.shapes(level);
            let mut boxes = Vec::with_capacity(h * w * shapes.len());
            for i in 0..h {
                for j in 0..w {
                    let (cy, cx) = (i as f64 * stride, j as f64 * stride);
                    boxes.extend(shapes.iter().map(|&(ah, aw)| Corners {
                        top: cy - ah / 2.0,
                        left: cx - aw / 2.0,
                        bottom: cy + ah / 2.0,
                        right: cx + aw / 2.0,
                    }));
                }
            }
            LevelAnchors {
                level,
                height: h,
                width: w,
                per_location: shapes.len(),
                boxes,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorState {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchThresholds {
    pub foreground: f64,
    pub background: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            foreground: 0.5,
            background: 0.4,
        }
    }
}

/// Match state of every anchor across all levels, in level order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    pub states: Vec<AnchorState>,
}

impl AnchorAssignment {
    pub fn positives(&self) -> usize {
        self.states.iter().filter(|s| matches!(s, AnchorState::Positive(_))).count()
    }
}

/// IoU matching: an anchor is positive for its best instance when that IoU reaches
/// `foreground`, negative below `background`, ignored in between. Each instance then
/// claims its single best anchor (lowest index on ties) if the overlap is non-zero.
pub fn match_anchors(anchors: &[Corners], instances: &[BBox], thresholds: &MatchThresholds) -> Result<AnchorAssignment> {
    let MatchThresholds { foreground, background } = *thresholds;
    if !(0.0 <= background && background < foreground && foreground <= 1.0) {
        return Err(Error::arg(format!("need 0 <= bg < fg <= 1, got bg={background} fg={foreground}")));
    }
    let gts: Vec<Corners> = instances.iter().map(BBox::corners).collect();
    let mut states = Vec::with_capacity(anchors.len());
    let mut best_anchor: Vec<(usize, f64)> = vec![(usize::MAX, 0.0); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = (usize::MAX, 0.0f64);
        for (n, gt) in gts.iter().enumerate() {
            let iou = anchor.iou(gt);
            if iou > best.1 || best.0 == usize::MAX {
                best = (n, iou);
            }
            if iou > best_anchor[n].1 {
                best_anchor[n] = (a, iou);
            }
        }
        states.push(if best.0 != usize::MAX && best.1 >= foreground {
            AnchorState::Positive(best.0)
        } else if best.1 < background {
            AnchorState::Negative
        } else {
            AnchorState::Ignore
        });
    }
    for (n, &(a, iou)) in best_anchor.iter().enumerate() {
        if a != usize::MAX && iou > 0.0 {
            states[a] = AnchorState::Positive(n);
        }
    }
    Ok(AnchorAssignment { states })
}

/// `(dy, dx, dh, dw)` of `target` relative to `anchor`.
pub fn encode_anchor_target(anchor: &Corners, target: &Corners) -> [f64; 4] {
    let (ah, aw) = (anchor.height(), anchor.width());
    let (acy, acx) = (anchor.top + ah / 2.0, anchor.left + aw / 2.0);
    let (th, tw) = (target.height(), target.width());
    let (tcy, tcx) = (target.top + th / 2.0, target.left + tw / 2.0);
    [(tcy - acy) / ah, (tcx - acx) / aw, (th / ah).ln(), (tw / aw).ln()]
}

/// Size deltas are capped so a wild prediction cannot overflow `exp`.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn decode_anchor_deltas(anchor: &Corners, deltas: &[f64; 4]) -> Corners {
    let (ah, aw) = (anchor.height(), anchor.width());
    let (acy, acx) = (anchor.top + ah / 2.0, anchor.left + aw / 2.0);
    let cy = acy + deltas[0] * ah;
    let cx = acx + deltas[1] * aw;
    let h = ah * deltas[2].min(MAX_LOG_SCALE).exp();
    let w = aw * deltas[3].min(MAX_LOG_SCALE).exp();
    Corners {
        top: cy - h / 2.0,
        left: cx - w / 2.0,
        bottom: cy + h / 2.0,
        right: cx + w / 2.0,
    }
}

/// Smooth-L1 with unit transition point and its derivative.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Gradients of the anchor-based loss: one `A*K` logit and one `A*4` delta entry
/// per anchor, in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrads {
    pub logits: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Focal classification over non-ignored anchors normalized by the positive count
/// (at least one), plus the mean over positive anchors of the summed smooth-L1 of
/// the four deltas. `probs` is `anchors x K`, `deltas` is `anchors x 4`.
pub fn anchor_branch_loss(
    assignment: &AnchorAssignment,
    anchors: &[Corners],
    instances: &[BBox],
    probs: &[f64],
    deltas: &[f64],
    num_classes: usize,
    focal: &FocalParams,
) -> Result<LossValue<AnchorGrads>> {
    let n = anchors.len();
    if assignment.states.len() != n || probs.len() != n * num_classes || deltas.len() != n * 4 {
        return Err(Error::shape(format!(
            "{} anchors, {} states, {} probabilities, {} deltas for K = {num_classes}",
            n,
            assignment.states.len(),
            probs.len(),
            deltas.len()
        )));
    }
    let positives = assignment.positives();
    let cls_norm = 1.0 / positives.max(1) as f64;
    let mut grads = AnchorGrads {
        logits: vec![0.0; probs.len()],
        deltas: vec![0.0; deltas.len()],
    };
    let (mut cls, mut reg) = (0.0, 0.0);
    for (a, state) in assignment.states.iter().enumerate() {
        let class = match *state {
            AnchorState::Ignore => continue,
            AnchorState::Negative => None,
            AnchorState::Positive(inst) => Some(instances[inst].class_id),
        };
        for k in 0..num_classes {
            let idx = a * num_classes + k;
            let fl = focal_loss(probs[idx], class == Some(k), focal.alpha, focal.gamma);
            cls += fl.value;
            grads.logits[idx] = fl.grad * cls_norm;
        }
        if let AnchorState::Positive(inst) = *state {
            let target = encode_anchor_target(&anchors[a], &instances[inst].corners());
            for c in 0..4 {
                let (v, d) = smooth_l1(deltas[a * 4 + c] - target[c]);
                reg += v;
                grads.deltas[a * 4 + c] = d / positives as f64;
            }
        }
    }
    let reg_value = if positives == 0 { 0.0 } else { reg / positives as f64 };
    Ok(LossValue {
        value: cls * cls_norm + reg_value,
        grad: grads,
    })
}
