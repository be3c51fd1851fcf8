//! Decoding head outputs into scored boxes, per-class greedy NMS, and `detect`.

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_anchor_deltas, generate_anchors};
use crate::detector::{LevelPrediction, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{decode_box, Corners, OffsetVector};
use crate::nn::{Real, Tensor};

pub const SCORE_THRESHOLD: f64 = 0.05;
pub const TOP_K: usize = 1000;
pub const NMS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
    /// `[top, left, bottom, right]` in image pixels.
    #[serde(rename = "box", with = "corners_array")]
    pub bbox: Corners,
}

mod corners_array {
    use super::Corners;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(c: &Corners, s: S) -> Result<S::Ok, S::Error> {
        c.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Corners, D::Error> {
        let [top, left, bottom, right] = <[f64; 4]>::deserialize(d)?;
        Ok(Corners {
            top,
            left,
            bottom,
            right,
        })
    }
}

/// A detection with the position it was decoded from, used to break score ties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub detection: Detection,
    /// `(level, i, j, class)`; anchor-based candidates fold the anchor index into `j`.
    pub key: (u32, usize, usize, usize),
}

fn by_score(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.detection
        .score
        .total_cmp(&a.detection.score)
        .then_with(|| a.key.cmp(&b.key))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub top_k: usize,
    pub normalizer: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            score_threshold: SCORE_THRESHOLD,
            top_k: TOP_K,
            normalizer: crate::geometry::OFFSET_NORMALIZER,
        }
    }
}

fn keep_top(mut c: Vec<Candidate>, top_k: usize) -> Vec<Candidate> {
    c.sort_by(by_score);
    c.truncate(top_k);
    c
}

/// Anchor-free decoding of one level: the best class per location, thresholded,
/// capped at `top_k` and decoded to image-plane boxes. `probs` is `K x H x W`,
/// `offsets` is `4 x H x W`.
pub fn decode_level(
    probs: &[f64],
    offsets: &[f64],
    num_classes: usize,
    height: usize,
    width: usize,
    level: u32,
    params: &DecodeParams,
) -> Result<Vec<Candidate>> {
    let plane = height * width;
    if probs.len() != num_classes * plane || offsets.len() != 4 * plane || num_classes == 0 {
        return Err(Error::shape(format!(
            "level {level}: {} probabilities and {} offsets for K = {num_classes} on {height}x{width}",
            probs.len(),
            offsets.len()
        )));
    }
    let mut out = Vec::new();
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            let (mut class, mut score) = (0, probs[p]);
            for k in 1..num_classes {
                if probs[k * plane + p] > score {
                    (class, score) = (k, probs[k * plane + p]);
                }
            }
            if score <= params.score_threshold {
                continue;
            }
            let off = OffsetVector::new(offsets[p], offsets[plane + p], offsets[2 * plane + p], offsets[3 * plane + p]);
            let bbox = decode_box(i, j, &off, params.normalizer, level);
            if !bbox.is_valid() {
                continue;
            }
            out.push(Candidate {
                detection: Detection {
                    class_id: class,
                    score,
                    bbox,
                },
                key: (level, i, j, class),
            });
        }
    }
    Ok(keep_top(out, params.top_k))
}

/// Anchor-based decoding of one level, same threshold and cap. `probs` is
/// `anchors x K`, `deltas` is `anchors x 4`; every anchor-class pair above the
/// threshold is a candidate.
pub fn decode_anchor_level(
    probs: &[f64],
    deltas: &[f64],
    anchors: &[Corners],
    num_classes: usize,
    level: u32,
    params: &DecodeParams,
) -> Result<Vec<Candidate>> {
    if probs.len() != anchors.len() * num_classes || deltas.len() != anchors.len() * 4 {
        return Err(Error::shape(format!("level {level}: anchor outputs do not match {} anchors", anchors.len())));
    }
    let mut out = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        for k in 0..num_classes {
            let score = probs[a * num_classes + k];
            if score <= params.score_threshold {
                continue;
            }
            let d = [deltas[a * 4], deltas[a * 4 + 1], deltas[a * 4 + 2], deltas[a * 4 + 3]];
            let bbox = decode_anchor_deltas(anchor, &d);
            if !bbox.is_valid() {
                continue;
            }
            out.push(Candidate {
                detection: Detection { class_id: k, score, bbox },
                key: (level, usize::MAX, a, k),
            });
        }
    }
    Ok(keep_top(out, params.top_k))
}

/// Greedy per-class NMS: walk candidates by descending score (ties by key) and keep
/// one iff its IoU with every kept same-class box is below `threshold`.
pub fn nms(candidates: &[Candidate], threshold: f64) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(by_score);
    let mut kept: Vec<Candidate> = Vec::new();
    for c in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.detection.class_id == c.detection.class_id && k.detection.bbox.iou(&c.detection.bbox) >= threshold);
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub decode: DecodeParams,
    pub nms_threshold: f64,
    /// Use the anchor-free branch if the model has one.
    pub anchor_free: bool,
    /// Use the anchor-based branch if the model has one.
    pub anchor_based: bool,
    /// Clip boxes to the (unpadded) image.
    pub clip: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            nms_threshold: NMS_THRESHOLD,
            anchor_free: true,
            anchor_based: true,
            clip: false,
        }
    }
}

/// All pre-NMS candidates of one image from already computed predictions.
pub fn candidates<T: Real>(
    model: &ModelParams<T>,
    preds: &[LevelPrediction],
    image_height: usize,
    image_width: usize,
    options: &DetectOptions,
) -> Result<Vec<Candidate>> {
    let cfg = &model.config;
    let k = cfg.num_classes;
    let mut out = Vec::new();
    if options.anchor_free {
        for p in preds {
            if let (Some(probs), Some(offs)) = (&p.af_probs, &p.af_offsets) {
                out.extend(decode_level(probs, offs, k, p.height, p.width, p.level, &options.decode)?);
            }
        }
    }
    if options.anchor_based && cfg.branches.anchor_based() {
        let anchors = generate_anchors(&cfg.pyramid(image_height, image_width), &cfg.anchors)?;
        for (p, la) in preds.iter().zip(&anchors) {
            if let (Some(probs), Some(deltas)) = (&p.ab_probs, &p.ab_deltas) {
                out.extend(decode_anchor_level(probs, deltas, &la.boxes, k, p.level, &options.decode)?);
            }
        }
    }
    if options.clip {
        let (h, w) = (image_height as f64, image_width as f64);
        out.retain_mut(|c| {
            c.detection.bbox = c.detection.bbox.clipped(h, w);
            c.detection.bbox.is_valid()
        });
    }
    Ok(out)
}

/// Forward one `3 x H x W` image, decode every enabled branch, merge and suppress.
pub fn detect<T: Real>(model: &ModelParams<T>, image: &Tensor<T>, options: &DetectOptions) -> Result<Vec<Detection>> {
    let (_, h, w) = image.chw();
    let (g, nodes) = model.build_graph(image)?;
    let preds = model.read_predictions(&g, &nodes);
    let c = candidates(model, &preds, h, w, options)?;
    Ok(nms(&c, options.nms_threshold).into_iter().map(|c| c.detection).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_model, Branches, ModelConfig};
    use proptest::prelude::*;

    fn det(class_id: usize, score: f64, t: f64, l: f64, b: f64, r: f64) -> Candidate {
        Candidate {
            detection: Detection {
                class_id,
                score,
                bbox: Corners {
                    top: t,
                    left: l,
                    bottom: b,
                    right: r,
                },
            },
            key: (3, 0, 0, class_id),
        }
    }

    #[test]
    fn decode_threshold_and_top_k() {
        let (h, w) = (2, 2);
        let offs = vec![1.0; 16];
        assert!(decode_level(&[0.01; 4], &offs, 1, h, w, 3, &DecodeParams::default())
            .unwrap()
            .is_empty());
        let probs = [0.9, 0.2, 0.04, 0.6];
        let p = DecodeParams {
            top_k: 2,
            ..DecodeParams::default()
        };
        let d = decode_level(&probs, &offs, 1, h, w, 3, &p).unwrap();
        let scores: Vec<f64> = d.iter().map(|c| c.detection.score).collect();
        assert_eq!(scores, vec![0.9, 0.6]);
    }

    #[test]
    fn decode_one_hot_location() {
        // Level 3, pixel (2, 1), offsets (0.5, 0.25, 0.75, 1.0), S = 4:
        // top = (2 - 2) * 8 = 0, left = (1 - 1) * 8 = 0, bottom = (2 + 3) * 8, right = (1 + 4) * 8.
        let (h, w) = (4, 4);
        let mut probs = vec![0.0; 2 * 16];
        probs[16 + 2 * 4 + 1] = 0.8;
        let mut offs = vec![0.0; 4 * 16];
        for (c, v) in [0.5, 0.25, 0.75, 1.0].into_iter().enumerate() {
            offs[c * 16 + 2 * 4 + 1] = v;
        }
        let d = decode_level(&probs, &offs, 2, h, w, 3, &DecodeParams::default()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].detection.class_id, 1);
        assert_eq!(d[0].detection.bbox.to_array(), [0.0, 0.0, 40.0, 40.0]);
    }

    #[test]
    fn nms_examples() {
        // 10x10 vs 10x10 shifted by 2.5: inter 75, union 125 -> 0.6.
        let a = det(0, 0.9, 0.0, 0.0, 10.0, 10.0);
        let b = det(0, 0.8, 0.0, 2.5, 10.0, 12.5);
        let kept = nms(&[b, a], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].detection.score, 0.9);
        // Shift by 5.3846: inter 46.15, union 153.85 -> 0.3.
        let c = det(0, 0.8, 0.0, 100.0 / 13.0 * 0.7, 10.0, 10.0 + 100.0 / 13.0 * 0.7);
        assert!((a.detection.bbox.iou(&c.detection.bbox) - 0.3).abs() < 1e-9);
        assert_eq!(nms(&[a, c], 0.5).len(), 2);
        let other = det(1, 0.5, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a, other], 0.5).len(), 2);
    }

    #[test]
    fn detect_is_deterministic_and_joint_is_superset() {
        let cfg = ModelConfig {
            branches: Branches::Both,
            prior_prob: 0.2,
            ..ModelConfig::default()
        };
        let m = build_model::<f32>(&cfg, 4).unwrap();
        let img = Tensor::from_vec(&[3, 64, 64], (0..3 * 64 * 64).map(|v| (v % 7) as f32 / 7.0).collect()).unwrap();
        let (g, nodes) = m.build_graph(&img).unwrap();
        let preds = m.read_predictions(&g, &nodes);
        let af = DetectOptions {
            anchor_based: false,
            ..DetectOptions::default()
        };
        let af_c = candidates(&m, &preds, 64, 64, &af).unwrap();
        let joint_c = candidates(&m, &preds, 64, 64, &DetectOptions::default()).unwrap();
        assert!(!af_c.is_empty());
        assert!(joint_c.len() > af_c.len());
        assert!(af_c.iter().all(|c| joint_c.contains(c)));
        let opts = DetectOptions::default();
        assert_eq!(detect(&m, &img, &opts).unwrap(), detect(&m, &img, &opts).unwrap());
    }

    #[test]
    fn detection_json_layout() {
        let d = det(2, 0.5, 1.0, 2.0, 3.0, 4.0).detection;
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"class":2,"score":0.5,"box":[1.0,2.0,3.0,4.0]}"#);
        assert_eq!(serde_json::from_str::<Detection>(&s).unwrap(), d);
    }

    proptest! {
        #[test]
        fn nms_invariants(boxes in prop::collection::vec((0usize..2, 0.0f64..1.0, 0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0), 0..60)) {
            let c: Vec<Candidate> = boxes.iter().enumerate().map(|(n, &(k, s, t, l, h, w))| Candidate {
                detection: Detection { class_id: k, score: s, bbox: Corners { top: t, left: l, bottom: t + h, right: l + w } },
                key: (3, n, 0, k),
            }).collect();
            let kept = nms(&c, 0.5);
            for w in kept.windows(2) {
                prop_assert!(w[0].detection.score >= w[1].detection.score);
            }
            for (x, a) in kept.iter().enumerate() {
                for b in &kept[x + 1..] {
                    if a.detection.class_id == b.detection.class_id {
                        prop_assert!(a.detection.bbox.iou(&b.detection.bbox) < 0.5);
                    }
                }
            }
        }
    }
}
