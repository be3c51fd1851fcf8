//! Focal and IoU losses with analytic gradients, their image-level
//! normalizations, and the per-instance level table used for online selection.

use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, project_unchecked, BBox, OffsetVector, PyramidSpec};
use crate::targets::{region_pixels, CellState, ClassTargetMap, RegressionTargetMap, TargetParams};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-9;
/// Weight of the anchor-free terms in the combined objective.
pub const AF_LOSS_WEIGHT: f64 = 0.5;

/// A loss value together with its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<G> {
    pub value: f64,
    pub grad: G,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: FOCAL_ALPHA,
            gamma: FOCAL_GAMMA,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of probability `p` and its derivative with respect to the logit
/// that produced `p` through a sigmoid.
pub fn focal_loss(p: f64, positive: bool, alpha: f64, gamma: f64) -> LossValue<f64> {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = 1.0 - p;
    if positive {
        // FL = -a q^g ln p;  dFL/dz = a q^g (g p ln p - q)
        let w = alpha * q.powf(gamma);
        LossValue {
            value: -w * p.ln(),
            grad: w * (gamma * p * p.ln() - q),
        }
    } else {
        // FL = -(1-a) p^g ln q;  dFL/dz = (1-a) p^g (p - g q ln q)
        let w = (1.0 - alpha) * p.powf(gamma);
        LossValue {
            value: -w * q.ln(),
            grad: w * (p - gamma * q * q.ln()),
        }
    }
}

/// `-ln(IoU)` between the boxes that two offset vectors describe around the same
/// pixel, with the gradient with respect to each predicted component.
pub fn iou_loss(pred: &OffsetVector, target: &OffsetVector) -> LossValue<[f64; 4]> {
    let p = pred.to_array();
    let t = target.to_array();
    let pred_area = (p[0] + p[2]) * (p[1] + p[3]);
    let target_area = (t[0] + t[2]) * (t[1] + t[3]);
    let ih = p[0].min(t[0]) + p[2].min(t[2]);
    let iw = p[1].min(t[1]) + p[3].min(t[3]);
    let inter = ih * iw;
    let union = pred_area + target_area - inter;
    if !(union > 0.0) {
        return LossValue {
            value: -IOU_EPS.ln(),
            grad: [0.0; 4],
        };
    }
    let iou = inter / union;
    let value = -(iou + IOU_EPS).ln();

    // d(pred_area)/d(top|bottom) = left + right, d/d(left|right) = top + bottom.
    let d_area = [p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]];
    // d(inter)/dp_c is the orthogonal overlap extent when p_c is the active min.
    let d_inter = [
        if p[0] < t[0] { iw } else { 0.0 },
        if p[1] < t[1] { ih } else { 0.0 },
        if p[2] < t[2] { iw } else { 0.0 },
        if p[3] < t[3] { ih } else { 0.0 },
    ];
    let scale = -1.0 / (iou + IOU_EPS);
    let mut grad = [0.0; 4];
    for c in 0..4 {
        let d_union = d_area[c] - d_inter[c];
        let d_iou = (d_inter[c] * union - inter * d_union) / (union * union);
        grad[c] = scale * d_iou;
    }
    LossValue { value, grad }
}

/// Anchor-free head outputs of one level: sigmoid probabilities `K x H x W` and
/// non-negative offsets `4 x H x W`, both channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub level: u32,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl HeadMaps {
    pub fn prob(&self, k: usize, i: usize, j: usize) -> f64 {
        self.probs[(k * self.height + i) * self.width + j]
    }

    pub fn offset(&self, i: usize, j: usize) -> OffsetVector {
        let plane = self.height * self.width;
        let p = i * self.width + j;
        OffsetVector::new(
            self.offsets[p],
            self.offsets[plane + p],
            self.offsets[2 * plane + p],
            self.offsets[3 * plane + p],
        )
    }
}

/// Sum of focal losses over every non-IGNORE cell, divided by the number of
/// POSITIVE cells across all levels. The gradient is with respect to the logits,
/// one vector per level laid out like the target map.
pub fn total_classification_loss(
    targets: &[ClassTargetMap],
    probs: &[&[f64]],
    focal: &FocalParams,
) -> Result<LossValue<Vec<Vec<f64>>>> {
    if targets.len() != probs.len() {
        return Err(Error::shape(format!("{} target levels vs {} prediction levels", targets.len(), probs.len())));
    }
    for (t, p) in targets.iter().zip(probs) {
        if t.cells.len() != p.len() {
            return Err(Error::shape(format!(
                "level {}: {} target cells vs {} predictions",
                t.level,
                t.cells.len(),
                p.len()
            )));
        }
    }
    let positives: usize = targets.iter().map(|t| t.count(CellState::Positive)).sum();
    let mut grads: Vec<Vec<f64>> = targets.iter().map(|t| vec![0.0; t.cells.len()]).collect();
    if positives == 0 {
        log::debug!("no positive cells; classification loss is zero for this image");
        return Ok(LossValue { value: 0.0, grad: grads });
    }
    let norm = 1.0 / positives as f64;
    let mut value = 0.0;
    for ((t, p), g) in targets.iter().zip(probs).zip(grads.iter_mut()) {
        for ((&cell, &prob), gc) in t.cells.iter().zip(p.iter()).zip(g.iter_mut()) {
            if cell == CellState::Ignore {
                continue;
            }
            let fl = focal_loss(prob, cell == CellState::Positive, focal.alpha, focal.gamma);
            value += fl.value;
            *gc = fl.grad * norm;
        }
    }
    Ok(LossValue {
        value: value * norm,
        grad: grads,
    })
}

/// Mean IoU loss over every valid regression cell. Gradients are with respect to
/// the predicted offsets, laid out `4 x H x W` per level.
pub fn total_regression_loss(targets: &[RegressionTargetMap], offsets: &[&[f64]]) -> Result<LossValue<Vec<Vec<f64>>>> {
    if targets.len() != offsets.len() {
        return Err(Error::shape(format!("{} target levels vs {} prediction levels", targets.len(), offsets.len())));
    }
    for (t, o) in targets.iter().zip(offsets) {
        if t.offsets.len() != o.len() {
            return Err(Error::shape(format!(
                "level {}: {} target offsets vs {} predictions",
                t.level,
                t.offsets.len(),
                o.len()
            )));
        }
    }
    let valid: usize = targets.iter().map(|t| t.valid_count()).sum();
    let mut grads: Vec<Vec<f64>> = targets.iter().map(|t| vec![0.0; t.offsets.len()]).collect();
    if valid == 0 {
        return Ok(LossValue { value: 0.0, grad: grads });
    }
    let norm = 1.0 / valid as f64;
    let mut value = 0.0;
    for ((t, o), g) in targets.iter().zip(offsets).zip(grads.iter_mut()) {
        let plane = t.height * t.width;
        for p in (0..plane).filter(|&p| t.mask[p]) {
            let at = |v: &[f64]| OffsetVector::new(v[p], v[plane + p], v[2 * plane + p], v[3 * plane + p]);
            let l = iou_loss(&at(o), &at(&t.offsets));
            value += l.value;
            for c in 0..4 {
                g[c * plane + p] = l.grad[c] * norm;
            }
        }
    }
    Ok(LossValue {
        value: value * norm,
        grad: grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelLoss {
    pub level: u32,
    pub focal: f64,
    pub iou: f64,
}

impl LevelLoss {
    pub fn sum(&self) -> f64 {
        self.focal + self.iou
    }
}

/// Mean focal and IoU loss of one instance over its effective region, per level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelLossTable {
    pub entries: Vec<LevelLoss>,
}

impl LevelLossTable {
    pub fn get(&self, level: u32) -> Option<&LevelLoss> {
        self.entries.iter().find(|e| e.level == level)
    }
}

/// Treat the instance's effective region on every level as positives of its class
/// and average the per-cell focal and IoU losses there.
pub fn instance_level_losses(
    instance: &BBox,
    predictions: &[HeadMaps],
    pyramid: &PyramidSpec,
    params: &TargetParams,
    focal: &FocalParams,
) -> Result<LevelLossTable> {
    if predictions.len() != pyramid.num_levels() {
        return Err(Error::shape(format!(
            "expected predictions for {} levels, got {}",
            pyramid.num_levels(),
            predictions.len()
        )));
    }
    let mut entries = Vec::with_capacity(predictions.len());
    for (level, pred) in pyramid.levels().zip(predictions) {
        if pred.level != level || (pred.height, pred.width) != pyramid.dims(level) {
            return Err(Error::shape(format!("prediction for level {level} has the wrong geometry")));
        }
        if instance.class_id >= pred.num_classes {
            return Err(Error::arg(format!("class {} outside {} predicted classes", instance.class_id, pred.num_classes)));
        }
        let pb = project_unchecked(instance, level);
        let px = region_pixels(instance, level, params.effective_scale, pyramid);
        let (mut fl, mut iou) = (0.0, 0.0);
        for (i, j) in px.iter() {
            fl += focal_loss(pred.prob(instance.class_id, i, j), true, focal.alpha, focal.gamma).value;
            let target = encode_offsets(&pb, i, j, params.normalizer).clamped_non_negative();
            iou += iou_loss(&pred.offset(i, j), &target).value;
        }
        let n = px.len() as f64;
        entries.push(LevelLoss {
            level,
            focal: fl / n,
            iou: iou / n,
        });
    }
    Ok(LevelLossTable { entries })
}

/// `L_ab + lambda * (L_cls_af + L_reg_af)`.
pub fn combined_loss(anchor_based: f64, af_classification: f64, af_regression: f64, lambda: f64) -> f64 {
    anchor_based + lambda * (af_classification + af_regression)
}
