//! Pyramid-level assignment: online selection by minimal loss and the
//! box-size heuristic it is compared against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PyramidSpec;
use crate::losses::LevelLossTable;

/// Box side (square root of area) that the heuristic maps onto `l0`.
pub const CANONICAL_SIZE: f64 = 224.0;
pub const DEFAULT_L0: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Online,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub instance: usize,
    pub level: u32,
    /// `(level, L_FL + L_IoU)` for online selection; empty for the heuristic.
    pub loss_sums: Vec<(u32, f64)>,
    pub method: SelectionMethod,
    /// Whether the other method picked the same level, once compared.
    pub agrees: Option<bool>,
}

impl SelectionResult {
    pub fn loss_sum(&self, level: u32) -> Option<f64> {
        self.loss_sums.iter().find(|(l, _)| *l == level).map(|&(_, s)| s)
    }
}

/// Level minimizing `L_FL + L_IoU`; ties go to the lowest level.
pub fn online_select(instance: usize, table: &LevelLossTable) -> Result<SelectionResult> {
    if table.entries.is_empty() {
        return Err(Error::arg("cannot select a level from an empty loss table"));
    }
    let loss_sums: Vec<(u32, f64)> = table.entries.iter().map(|e| (e.level, e.sum())).collect();
    let mut best = loss_sums[0];
    for &(level, sum) in &loss_sums[1..] {
        if sum < best.1 || (sum == best.1 && level < best.0) {
            best = (level, sum);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::arg(format!("non-finite loss sum for instance {instance}")));
    }
    Ok(SelectionResult {
        instance,
        level: best.0,
        loss_sums,
        method: SelectionMethod::Online,
        agrees: None,
    })
}

/// `floor(l0 + log2(sqrt(w h) / 224))` before clamping.
pub fn heuristic_level_unclamped(w: f64, h: f64, l0: i64) -> Result<i64> {
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(Error::arg(format!("box dimensions must be positive, got {w} x {h}")));
    }
    // log2(sqrt(wh)) = (log2 w + log2 h) / 2 keeps powers of two exact.
    let rel = (w.log2() + h.log2()) / 2.0 - CANONICAL_SIZE.log2();
    Ok((l0 as f64 + rel).floor() as i64)
}

pub fn heuristic_select(instance: usize, w: f64, h: f64, l0: i64, pyramid: &PyramidSpec) -> Result<SelectionResult> {
    let level = pyramid.clamp_level(heuristic_level_unclamped(w, h, l0)?);
    Ok(SelectionResult {
        instance,
        level,
        loss_sums: Vec::new(),
        method: SelectionMethod::Heuristic,
        agrees: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementStats {
    pub total: usize,
    pub agree: usize,
    pub disagree: usize,
    pub disagreement_rate: f64,
    /// Counts keyed by `(online level, heuristic level)`.
    pub contingency: BTreeMap<(u32, u32), usize>,
}

pub fn agreement_stats(online: &[SelectionResult], heuristic: &[SelectionResult]) -> Result<AgreementStats> {
    if online.len() != heuristic.len() {
        return Err(Error::arg(format!(
            "{} online selections vs {} heuristic selections",
            online.len(),
            heuristic.len()
        )));
    }
    let mut contingency = BTreeMap::new();
    let mut agree = 0;
    for (o, h) in online.iter().zip(heuristic) {
        if o.instance != h.instance {
            return Err(Error::arg(format!("instance sets differ ({} vs {})", o.instance, h.instance)));
        }
        *contingency.entry((o.level, h.level)).or_insert(0) += 1;
        if o.level == h.level {
            agree += 1;
        }
    }
    let total = online.len();
    Ok(AgreementStats {
        total,
        agree,
        disagree: total - agree,
        disagreement_rate: if total == 0 { 0.0 } else { (total - agree) as f64 / total as f64 },
        contingency,
    })
}

/// Fill in the `agrees` flag on both sides and return the summary.
pub fn annotate_agreement(online: &mut [SelectionResult], heuristic: &mut [SelectionResult]) -> Result<AgreementStats> {
    let stats = agreement_stats(online, heuristic)?;
    for (o, h) in online.iter_mut().zip(heuristic.iter_mut()) {
        let same = o.level == h.level;
        o.agrees = Some(same);
        h.agrees = Some(same);
    }
    Ok(stats)
}
