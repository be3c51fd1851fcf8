//! End-to-end finite-difference check of the backpropagated gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{make_synthetic, SynthConfig};
use crate::detector::{Branches, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::Tensor;
use crate::targets::Assignment;
use crate::train::{image_objective, Objective};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Total parameters to probe, spread over every tensor.
    pub samples: usize,
    /// Kink-free probes needed for a pass.
    pub min_probes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this in magnitude are compared in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 240,
            min_probes: 200,
            step: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step of the accepted central difference.
    pub step: f64,
    /// No step down to `step / 1000` kept every ReLU on the same side of zero.
    pub kinked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub probes: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Layer (tensor name without `.weight`/`.bias`) holding the worst probe.
    pub worst_layer: String,
    pub worst: Option<ProbeResult>,
    /// Probes that straddled an activation kink at every step; their error is
    /// reported but does not count against the tolerance.
    pub kinked: usize,
    /// Worst relative error per tensor, in parameter order.
    pub per_tensor: Vec<(String, f64)>,
}

/// A model small enough to probe quickly: P3-P4 on 32x32 inputs, both branches.
pub fn tiny_config(num_classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig {
        num_classes,
        min_level: 3,
        max_level: 4,
        backbone_channels: vec![4, 6, 8, 8],
        feature_channels: 6,
        head_depth: 1,
        branches: Branches::Both,
        ..ModelConfig::default()
    };
    cfg.anchors.base_multiplier = 1.5;
    cfg
}

/// A few small synthetic images for the check, as `f64` tensors.
pub fn tiny_batch(images: usize, num_classes: usize, seed: u64) -> Result<Vec<(Tensor<f64>, Vec<BBox>)>> {
    let d = make_synthetic(&SynthConfig {
        num_images: images,
        image_size: 32,
        num_classes,
        min_instances: 1,
        max_instances: 3,
        min_box: 4.0,
        max_box: Some(16.0),
        seed,
        first_id: 0,
    })?;
    Ok(d.samples()?
        .into_iter()
        .map(|s| (s.image.cast(), s.instances))
        .collect())
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    let d = (a - n).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(n.abs()).max(floor)
    }
}

/// Sum of per-image losses under a frozen level assignment, with the ReLU pattern
/// of each image.
fn batch_loss(
    params: &ModelParams<f64>,
    batch: &[(Tensor<f64>, Vec<BBox>)],
    frozen: &[Assignment],
    obj: &Objective,
) -> Result<(f64, Vec<u64>)> {
    let mut total = 0.0;
    let mut patterns = Vec::with_capacity(batch.len());
    for ((img, inst), a) in batch.iter().zip(frozen) {
        let out = image_objective(params, img, inst, obj, Some(a), false)?;
        total += out.loss.total;
        patterns.push(out.relu_pattern);
    }
    Ok((total, patterns))
}

/// Compare backprop against central differences on sampled parameters.
///
/// Level selection is computed once at the starting point and frozen, so the
/// probed function is the loss for a fixed target assignment. `corrupt` scales
/// the analytic gradient of every tensor whose name starts with the given prefix,
/// which must make the check fail and point at that layer.
pub fn gradient_check(
    params: &ModelParams<f64>,
    batch: &[(Tensor<f64>, Vec<BBox>)],
    obj: &Objective,
    cfg: &GradCheckConfig,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    if params.num_scalars() > 10_000 {
        return Err(Error::arg(format!("{} parameters; the check expects at most 10k", params.num_scalars())));
    }
    let mut frozen = Vec::with_capacity(batch.len());
    let mut grads = params.zeros_like();
    for (img, inst) in batch {
        let out = image_objective(params, img, inst, obj, None, true)?;
        let assignment = if params.config.branches.anchor_free() {
            Assignment(out.selections.iter().map(|s| s.level).collect())
        } else {
            Assignment(vec![params.config.min_level; inst.len()])
        };
        frozen.push(assignment);
        for (acc, g) in grads.iter_mut().zip(out.grads.expect("backward requested")) {
            acc.add_assign(&g);
        }
    }
    if let Some(prefix) = corrupt {
        let mut hit = false;
        for (name, g) in params.names().iter().zip(grads.iter_mut()) {
            if name.starts_with(prefix) {
                hit = true;
                for v in g.data_mut() {
                    *v = *v * 1.5 + 1e-3;
                }
            }
        }
        if !hit {
            return Err(Error::arg(format!("no tensor named {prefix}*")));
        }
    }

    let tensors = params.tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_tensor = cfg.samples.div_ceil(tensors.len()).max(1);
    let mut probes = Vec::new();
    let mut per_tensor_err = Vec::with_capacity(tensors.len());
    let mut work = params.clone();
    let (_, base_pattern) = batch_loss(params, batch, &frozen, obj)?;
    for (ti, t) in tensors.iter().enumerate() {
        let n = per_tensor.min(t.len());
        let mut idx: Vec<usize> = sample(&mut rng, t.len(), n).into_vec();
        idx.sort_unstable();
        let mut worst = 0.0f64;
        for i in idx {
            let orig = t.data()[i];
            let mut accepted = None;
            // Central differences are only meaningful on one linear piece of every
            // ReLU; shrink the step until neither side crosses a kink.
            for shrink in [1.0, 0.1, 0.01, 0.001] {
                let h = cfg.step * shrink;
                work.tensors_mut()[ti].data_mut()[i] = orig + h;
                let (plus, pp) = batch_loss(&work, batch, &frozen, obj)?;
                work.tensors_mut()[ti].data_mut()[i] = orig - h;
                let (minus, pm) = batch_loss(&work, batch, &frozen, obj)?;
                work.tensors_mut()[ti].data_mut()[i] = orig;
                let smooth = pp == base_pattern && pm == base_pattern;
                accepted = Some(((plus - minus) / (2.0 * h), h, !smooth));
                if smooth {
                    break;
                }
            }
            let (numeric, step, kinked) = accepted.expect("at least one step");
            let analytic = grads[ti].data()[i];
            let e = rel_error(analytic, numeric, cfg.abs_floor);
            if !kinked {
                worst = worst.max(e);
            }
            probes.push(ProbeResult {
                tensor: params.names()[ti].clone(),
                index: i,
                analytic,
                numeric,
                rel_error: e,
                step,
                kinked,
            });
        }
        per_tensor_err.push((params.names()[ti].clone(), worst));
    }
    let kinked = probes.iter().filter(|p| p.kinked).count();
    let worst = probes.iter().filter(|p| !p.kinked).max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).cloned();
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    let worst_layer = worst
        .as_ref()
        .map(|w| w.tensor.trim_end_matches(".weight").trim_end_matches(".bias").to_string())
        .unwrap_or_default();
    Ok(GradCheckReport {
        parameters: params.num_scalars(),
        probes: probes.len(),
        max_rel_error,
        tolerance: cfg.tolerance,
        passed: max_rel_error < cfg.tolerance && probes.len() - kinked >= cfg.min_probes.min(params.num_scalars()),
        worst_layer,
        worst,
        kinked,
        per_tensor: per_tensor_err,
    })
}
