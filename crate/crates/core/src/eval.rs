//! COCO-style average precision over the synthetic set.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::AnnotationFile;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::Corners;
use crate::inference::Detection;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|n| 0.5 + 0.05 * n as f64).collect()
}

pub const RECALL_POINTS: usize = 101;
pub const MAX_DETECTIONS: usize = 100;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..MEDIUM_AREA).contains(&area),
            AreaRange::Large => area >= MEDIUM_AREA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AP_S")]
    pub ap_small: f64,
    #[serde(rename = "AP_M")]
    pub ap_medium: f64,
    #[serde(rename = "AP_L")]
    pub ap_large: f64,
    /// AP over `0.50:0.95` per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>8}", "metric", "value")?;
        for (name, v) in [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_S", self.ap_small),
            ("AP_M", self.ap_medium),
            ("AP_L", self.ap_large),
        ] {
            writeln!(f, "{name:<8}{v:>8.4}")?;
        }
        for (k, v) in self.per_class.iter().enumerate() {
            match v {
                Some(v) => writeln!(f, "{:<8}{v:>8.4}", format!("class{k}"))?,
                None => writeln!(f, "{:<8}{:>8}", format!("class{k}"), "-")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Truth {
    class_id: usize,
    bbox: Corners,
    area: f64,
}

/// Detections and ground truth of one image for one class.
struct Scene<'a> {
    dets: Vec<&'a Detection>,
    truths: Vec<&'a Truth>,
    /// `ious[d][g]`.
    ious: Vec<Vec<f64>>,
}

/// Per-detection outcome at one threshold: `Some(true)` TP, `Some(false)` FP, `None` ignored.
fn match_scene(scene: &Scene<'_>, threshold: f64, range: AreaRange) -> (Vec<(f64, Option<bool>)>, usize) {
    let ignored: Vec<bool> = scene.truths.iter().map(|t| !range.contains(t.area)).collect();
    let npos = ignored.iter().filter(|i| !**i).count();
    let mut taken = vec![false; scene.truths.len()];
    let mut out = Vec::with_capacity(scene.dets.len());
    for (d, det) in scene.dets.iter().enumerate() {
        // Prefer unmatched in-range truths; fall back to out-of-range ones.
        let mut best: Option<usize> = None;
        for pass_ignored in [false, true] {
            let mut best_iou = threshold;
            for g in 0..scene.truths.len() {
                if taken[g] || ignored[g] != pass_ignored {
                    continue;
                }
                if scene.ious[d][g] >= best_iou {
                    best_iou = scene.ious[d][g];
                    best = Some(g);
                }
            }
            if best.is_some() {
                break;
            }
        }
        let outcome = match best {
            Some(g) => {
                taken[g] = true;
                if ignored[g] {
                    None
                } else {
                    Some(true)
                }
            }
            None if !range.contains(det.bbox.area()) => None,
            None => Some(false),
        };
        out.push((det.score, outcome));
    }
    (out, npos)
}

/// 101-point interpolated AP from scored outcomes; `None` when there are no positives.
pub fn interpolated_ap(mut outcomes: Vec<(f64, bool)>, npos: usize) -> Option<f64> {
    if npos == 0 {
        return None;
    }
    // Stable: equal scores keep their image order.
    outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(outcomes.len());
    let mut precision = Vec::with_capacity(outcomes.len());
    for (_, hit) in &outcomes {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for n in (1..precision.len()).rev() {
        precision[n - 1] = precision[n - 1].max(precision[n]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < target);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluate detections against annotations. Images without an entry in
/// `detections` count as having none; detections for unknown images are an error.
/// Each image keeps at most its 100 highest-scoring detections. Metrics over
/// classes or partitions without ground truth are 0.
pub fn evaluate(detections: &[ImageDetections], annotations: &AnnotationFile, exec: Execution) -> Result<EvalReport> {
    let k = annotations.num_classes;
    let mut by_image: HashMap<u64, &ImageDetections> = HashMap::new();
    for d in detections {
        if !annotations.images.iter().any(|e| e.id == d.image_id) {
            return Err(Error::arg(format!("detections for unknown image {}", d.image_id)));
        }
        if by_image.insert(d.image_id, d).is_some() {
            return Err(Error::arg(format!("image {} listed twice", d.image_id)));
        }
        if let Some(bad) = d.detections.iter().find(|x| x.class_id >= k) {
            return Err(Error::arg(format!("detection class {} outside {k} classes", bad.class_id)));
        }
    }
    let mut truths: HashMap<u64, Vec<Truth>> = HashMap::new();
    for inst in &annotations.instances {
        let b = inst.to_bbox()?;
        truths.entry(inst.image_id).or_default().push(Truth {
            class_id: inst.class,
            bbox: b.corners(),
            area: b.area(),
        });
    }
    let empty_t: Vec<Truth> = Vec::new();
    let ids: Vec<u64> = annotations.images.iter().map(|e| e.id).collect();

    // scenes[image][class]
    let scenes: Vec<Vec<Scene<'_>>> = exec.map(&ids, |id| {
        let mut dets: Vec<&Detection> = by_image.get(id).map(|d| d.detections.iter().collect()).unwrap_or_default();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(MAX_DETECTIONS);
        let ts = truths.get(id).unwrap_or(&empty_t);
        (0..k)
            .map(|class| {
                let dets: Vec<&Detection> = dets.iter().copied().filter(|d| d.class_id == class).collect();
                let truths: Vec<&Truth> = ts.iter().filter(|t| t.class_id == class).collect();
                let ious = dets
                    .iter()
                    .map(|d| truths.iter().map(|t| d.bbox.iou(&t.bbox)).collect())
                    .collect();
                Scene { dets, truths, ious }
            })
            .collect()
    });

    let thresholds = iou_thresholds();
    // ap[range][class][threshold]
    let ap_for = |range: AreaRange, class: usize, t: f64| -> Option<f64> {
        let mut outcomes = Vec::new();
        let mut npos = 0;
        for per_class in &scenes {
            let (o, n) = match_scene(&per_class[class], t, range);
            npos += n;
            outcomes.extend(o.into_iter().filter_map(|(s, hit)| hit.map(|h| (s, h))));
        }
        interpolated_ap(outcomes, npos)
    };
    let table = |range: AreaRange| -> Vec<Vec<Option<f64>>> {
        (0..k)
            .map(|c| thresholds.iter().map(|&t| ap_for(range, c, t)).collect())
            .collect()
    };
    let all = table(AreaRange::All);
    let over_all = |tab: &Vec<Vec<Option<f64>>>| mean(tab.iter().flat_map(|row| row.iter().copied()));
    let at = |idx: usize| mean(all.iter().map(|row| row[idx]));
    let per_class: Vec<Option<f64>> = all.iter().map(|row| mean(row.iter().copied())).collect();
    Ok(EvalReport {
        ap: over_all(&all).unwrap_or(0.0),
        ap50: at(0).unwrap_or(0.0),
        ap75: at(5).unwrap_or(0.0),
        ap_small: over_all(&table(AreaRange::Small)).unwrap_or(0.0),
        ap_medium: over_all(&table(AreaRange::Medium)).unwrap_or(0.0),
        ap_large: over_all(&table(AreaRange::Large)).unwrap_or(0.0),
        per_class,
    })
}
