//! Per-image objective with reverse-mode gradients, and the SGD trainer.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_branch_loss, generate_anchors, match_anchors, MatchThresholds};
use crate::detector::{anchor_rows_to_channels, build_model, LevelPrediction, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{BBox, Corners, PyramidSpec};
use crate::losses::{
    combined_loss, instance_level_losses, total_classification_loss, total_regression_loss, FocalParams, HeadMaps,
    AF_LOSS_WEIGHT,
};
use crate::nn::{NodeId, Real, Tensor};
use crate::selection::{heuristic_select, online_select, SelectionResult};
use crate::targets::{generate_targets, Assignment, TargetParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Online,
    Heuristic,
}

/// Training configuration. Every field has a default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Learning rate at `reference_batch`; the effective rate scales linearly with
    /// `batch_size`.
    pub base_lr: f64,
    pub reference_batch: usize,
    /// Linear ramp from `warmup_factor * lr` over the first iterations.
    pub warmup_iterations: usize,
    pub warmup_factor: f64,
    /// Fractions of `iterations` after which the rate is divided by 10.
    pub lr_steps: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the anchor-free terms.
    pub lambda: f64,
    pub selection: SelectionMode,
    pub heuristic_l0: i64,
    pub targets: TargetParams,
    pub focal: FocalParams,
    pub anchor_matching: MatchThresholds,
    pub horizontal_flip: bool,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            base_lr: 0.01,
            reference_batch: 16,
            warmup_iterations: 100,
            warmup_factor: 1.0 / 3.0,
            lr_steps: vec![2.0 / 3.0, 8.0 / 9.0],
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda: AF_LOSS_WEIGHT,
            selection: SelectionMode::Online,
            heuristic_l0: 7,
            targets: TargetParams::default(),
            focal: FocalParams::default(),
            anchor_matching: MatchThresholds::default(),
            horizontal_flip: true,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.iterations == 0 || self.batch_size == 0 || self.reference_batch == 0 {
            return Err(Error::arg("iterations and batch sizes must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return Err(Error::arg("learning rate and warmup factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::arg("momentum must lie in [0, 1); weight decay and lambda must be non-negative"));
        }
        if self.lr_steps.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::arg("lr steps are fractions of the run"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.lambda,
            selection: self.selection,
            heuristic_l0: self.heuristic_l0,
            targets: self.targets,
            focal: self.focal,
            matching: self.anchor_matching,
        }
    }

    /// Learning rate for 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let mut lr = self.base_lr * self.batch_size as f64 / self.reference_batch as f64;
        for &f in &self.lr_steps {
            if it as f64 >= f * self.iterations as f64 {
                lr /= 10.0;
            }
        }
        if it < self.warmup_iterations {
            let t = it as f64 / self.warmup_iterations as f64;
            lr *= self.warmup_factor + (1.0 - self.warmup_factor) * t;
        }
        lr
    }
}

/// Everything about the loss that does not live in the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub selection: SelectionMode,
    pub heuristic_l0: i64,
    pub targets: TargetParams,
    pub focal: FocalParams,
    pub matching: MatchThresholds,
}

impl Default for Objective {
    fn default() -> Self {
        TrainConfig::default().objective()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub anchor_based: f64,
    pub af_classification: f64,
    pub af_regression: f64,
    pub total: f64,
}

impl LossReport {
    fn is_finite(&self) -> bool {
        [self.anchor_based, self.af_classification, self.af_regression, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss, per-instance level selections, and (optionally) parameter gradients for one image.
#[derive(Debug, Clone)]
pub struct ImageOutcome<T> {
    pub loss: LossReport,
    pub selections: Vec<SelectionResult>,
    pub grads: Option<Vec<Tensor<T>>>,
    pub touched: Vec<bool>,
    /// See [`crate::nn::Graph::relu_pattern`].
    pub relu_pattern: u64,
}

pub fn head_maps(preds: &[LevelPrediction], num_classes: usize) -> Vec<HeadMaps> {
    preds
        .iter()
        .map(|p| HeadMaps {
            level: p.level,
            num_classes,
            height: p.height,
            width: p.width,
            probs: p.af_probs.clone().unwrap_or_default(),
            offsets: p.af_offsets.clone().unwrap_or_default(),
        })
        .collect()
}

/// Pick a level for each instance from the current predictions (online) or box size.
pub fn select_levels(
    instances: &[BBox],
    maps: &[HeadMaps],
    pyramid: &PyramidSpec,
    objective: &Objective,
) -> Result<Vec<SelectionResult>> {
    instances
        .iter()
        .enumerate()
        .map(|(n, b)| match objective.selection {
            SelectionMode::Online => {
                let table = instance_level_losses(b, maps, pyramid, &objective.targets, &objective.focal)?;
                online_select(n, &table)
            }
            SelectionMode::Heuristic => heuristic_select(n, b.w, b.h, objective.heuristic_l0, pyramid),
        })
        .collect()
}

fn to_tensor<T: Real>(shape: &[usize], values: &[f64], scale: f64) -> Tensor<T> {
    Tensor::from_vec(shape, values.iter().map(|&v| T::from_f64(v * scale)).collect()).expect("shape matches")
}

/// Forward one `3 x H x W` image, compute the combined loss and, if `backward`,
/// its gradient with respect to every parameter.
///
/// `frozen` replaces the selection step with a fixed assignment, which makes the
/// loss a smooth function of the parameters for finite-difference checks.
pub fn image_objective<T: Real>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    instances: &[BBox],
    objective: &Objective,
    frozen: Option<&Assignment>,
    backward: bool,
) -> Result<ImageOutcome<T>> {
    let cfg = &params.config;
    let k = cfg.num_classes;
    if let Some(b) = instances.iter().find(|b| b.class_id >= k) {
        return Err(Error::arg(format!("instance class {} outside {k} classes", b.class_id)));
    }
    let (g, nodes) = params.build_graph(image)?;
    let preds = params.read_predictions(&g, &nodes);
    let (_, h, w) = image.chw();
    let pyramid = cfg.pyramid(h, w);
    let mut seeds: Vec<(NodeId, Tensor<T>)> = Vec::new();
    let mut loss = LossReport::default();
    let mut selections = Vec::new();

    if cfg.branches.anchor_free() {
        let maps = head_maps(&preds, k);
        let assignment = match frozen {
            Some(a) => a.clone(),
            None => {
                selections = select_levels(instances, &maps, &pyramid, objective)?;
                Assignment(selections.iter().map(|s| s.level).collect())
            }
        };
        let targets = generate_targets(instances, &assignment, &pyramid, k, &objective.targets)?;
        let probs: Vec<&[f64]> = maps.iter().map(|m| m.probs.as_slice()).collect();
        let offsets: Vec<&[f64]> = maps.iter().map(|m| m.offsets.as_slice()).collect();
        let cls = total_classification_loss(&targets.classes, &probs, &objective.focal)?;
        let reg = total_regression_loss(&targets.regression, &offsets)?;
        loss.af_classification = cls.value;
        loss.af_regression = reg.value;
        if backward && objective.lambda > 0.0 {
            for (idx, ln) in nodes.iter().enumerate() {
                let (logits, offs) = (ln.af_logits.expect("af branch"), ln.af_offsets.expect("af branch"));
                seeds.push((logits, to_tensor(g.value(logits).shape(), &cls.grad[idx], objective.lambda)));
                seeds.push((offs, to_tensor(g.value(offs).shape(), &reg.grad[idx], objective.lambda)));
            }
        }
    }

    if cfg.branches.anchor_based() {
        let levels = generate_anchors(&pyramid, &cfg.anchors)?;
        let anchors: Vec<Corners> = levels.iter().flat_map(|l| l.boxes.iter().copied()).collect();
        let assignment = match_anchors(&anchors, instances, &objective.matching)?;
        let probs: Vec<f64> = preds.iter().flat_map(|p| p.ab_probs.as_deref().unwrap_or_default()).copied().collect();
        let deltas: Vec<f64> = preds.iter().flat_map(|p| p.ab_deltas.as_deref().unwrap_or_default()).copied().collect();
        let ab = anchor_branch_loss(&assignment, &anchors, instances, &probs, &deltas, k, &objective.focal)?;
        loss.anchor_based = ab.value;
        if backward {
            let a = cfg.anchors_per_location();
            let (mut lo, mut dlo) = (0, 0);
            for (ln, la) in nodes.iter().zip(&levels) {
                let plane = la.height * la.width;
                let (logits, dnode) = (ln.ab_logits.expect("ab branch"), ln.ab_deltas.expect("ab branch"));
                let gl = anchor_rows_to_channels(&ab.grad.logits[lo..lo + plane * a * k], a, k, plane);
                let gd = anchor_rows_to_channels(&ab.grad.deltas[dlo..dlo + plane * a * 4], a, 4, plane);
                seeds.push((logits, to_tensor(g.value(logits).shape(), &gl, 1.0)));
                seeds.push((dnode, to_tensor(g.value(dnode).shape(), &gd, 1.0)));
                lo += plane * a * k;
                dlo += plane * a * 4;
            }
        }
    }

    loss.total = combined_loss(loss.anchor_based, loss.af_classification, loss.af_regression, objective.lambda);
    let (grads, touched) = if backward {
        let mut grads = params.zeros_like();
        let touched = g.backward(seeds, &mut grads);
        (Some(grads), touched)
    } else {
        (None, vec![false; params.tensors().len()])
    };
    Ok(ImageOutcome {
        loss,
        selections,
        grads,
        touched,
        relu_pattern: g.relu_pattern(),
    })
}

/// One training example: a `3 x H x W` image and its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub instances: Vec<BBox>,
}

impl Sample {
    pub fn flipped_horizontally(&self) -> Sample {
        let (c, h, w) = self.image.chw();
        let src = self.image.data();
        let mut data = Vec::with_capacity(src.len());
        for row in 0..c * h {
            data.extend(src[row * w..(row + 1) * w].iter().rev());
        }
        Sample {
            image: Tensor::from_vec(&[c, h, w], data).expect("same shape"),
            instances: self.instances.iter().map(|b| b.flipped_horizontally(w as f64)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossReport,
}

/// Sole owner of the parameters during training. Per-image work fans out through
/// [`Execution`]; gradients are summed in batch order so results do not depend on
/// the thread count.
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams<f32>,
    velocity: Vec<Tensor<f32>>,
    iteration: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    exec: Execution,
}

impl Trainer {
    pub fn new(config: TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let params = build_model(&config.model, config.seed)?;
        Self::with_params(config, params, exec)
    }

    pub fn with_params(config: TrainConfig, params: ModelParams<f32>, exec: Execution) -> Result<Self> {
        config.validate()?;
        if params.config != config.model {
            return Err(Error::arg("model parameters were built from a different model config"));
        }
        let velocity = params.zeros_like();
        // A separate stream from model init so changing one does not shift the other.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(Self {
            config,
            params,
            velocity,
            iteration: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
            exec,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Indices of the next batch, walking reshuffled epochs of `n` samples.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Forward, select, build targets, backpropagate and apply one SGD update.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let flips: Vec<bool> = batch
            .iter()
            .map(|_| self.config.horizontal_flip && self.rng.gen_bool(0.5))
            .collect();
        let objective = self.config.objective();
        let params = &self.params;
        let outcomes = self.exec.map_indexed(batch.len(), |n| {
            let flipped;
            let s = if flips[n] {
                flipped = batch[n].flipped_horizontally();
                &flipped
            } else {
                batch[n]
            };
            image_objective(params, &s.image, &s.instances, &objective, None, true)
        });

        let mut grads = self.params.zeros_like();
        let mut touched = vec![false; grads.len()];
        let mut loss = LossReport::default();
        for (n, outcome) in outcomes.into_iter().enumerate() {
            let outcome = outcome.map_err(|e| self.non_finite_context(e, n))?;
            if !outcome.loss.is_finite() {
                return Err(self.diagnose(n, batch[n], flips[n], &outcome));
            }
            for (acc, g) in grads.iter_mut().zip(outcome.grads.expect("backward requested")) {
                acc.add_assign(&g);
            }
            for (t, o) in touched.iter_mut().zip(&outcome.touched) {
                *t |= *o;
            }
            loss.anchor_based += outcome.loss.anchor_based;
            loss.af_classification += outcome.loss.af_classification;
            loss.af_regression += outcome.loss.af_regression;
            loss.total += outcome.loss.total;
        }
        let inv = 1.0 / batch.len() as f64;
        loss.anchor_based *= inv;
        loss.af_classification *= inv;
        loss.af_regression *= inv;
        loss.total *= inv;

        let lr = self.config.lr_at(self.iteration);
        self.apply_sgd(&mut grads, &touched, inv, lr)?;
        let report = StepReport {
            iteration: self.iteration,
            lr,
            loss,
        };
        self.iteration += 1;
        Ok(report)
    }

    fn apply_sgd(&mut self, grads: &mut [Tensor<f32>], touched: &[bool], inv_batch: f64, lr: f64) -> Result<()> {
        let (mu, wd) = (self.config.momentum as f32, self.config.weight_decay as f32);
        let (inv, lr) = (inv_batch as f32, lr as f32);
        for (idx, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    iteration: self.iteration,
                    detail: format!("gradient of {} is not finite", self.params.names()[idx]),
                });
            }
        }
        let names_touched = touched.iter().filter(|t| **t).count();
        log::trace!("iteration {}: updating {names_touched} tensors", self.iteration);
        let tensors = self.params.tensors_mut();
        for idx in (0..tensors.len()).filter(|&i| touched[i]) {
            let w = tensors[idx].data_mut();
            let v = self.velocity[idx].data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(grads[idx].data()) {
                *v = mu * *v + (*g * inv + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }

    fn non_finite_context(&self, e: Error, image: usize) -> Error {
        match e {
            Error::InvalidArgument(msg) if msg.contains("non-finite") => Error::NonFinite {
                iteration: self.iteration,
                detail: format!("image {image} of the batch: {msg}"),
            },
            other => other,
        }
    }

    /// Find the instance and level whose terms went non-finite.
    fn diagnose(&self, image: usize, sample: &Sample, flipped: bool, outcome: &ImageOutcome<f32>) -> Error {
        let mut detail = format!("image {image} of the batch: loss {:?}", outcome.loss);
        let s = if flipped { sample.flipped_horizontally() } else { sample.clone() };
        for sel in &outcome.selections {
            if let Some(&(level, sum)) = sel.loss_sums.iter().find(|(_, v)| !v.is_finite()) {
                detail = format!("image {image}, instance {}, level {level}: loss sum {sum}", sel.instance);
                break;
            }
        }
        if outcome.selections.is_empty() {
            if let Some(b) = s.instances.first() {
                detail.push_str(&format!("; first instance {b:?}"));
            }
        }
        Error::NonFinite {
            iteration: self.iteration,
            detail,
        }
    }

    /// Train for the configured number of iterations, calling `on_step` after each.
    pub fn run(&mut self, data: &[Sample], mut on_step: impl FnMut(&StepReport)) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::arg("no training samples"));
        }
        let mut log = Vec::with_capacity(self.config.iterations);
        while self.iteration < self.config.iterations {
            let idx = self.next_batch(data.len());
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let report = self.train_step(&batch)?;
            on_step(&report);
            log.push(report);
        }
        Ok(log)
    }
}

pub const LOSS_LOG_HEADER: &str = "iteration,lr,loss_ab,loss_af_cls,loss_af_reg,loss_total";

/// CSV with one row per iteration.
pub fn write_loss_log(mut w: impl Write, steps: &[StepReport]) -> Result<()> {
    writeln!(w, "{LOSS_LOG_HEADER}")?;
    for s in steps {
        let l = &s.loss;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.iteration, s.lr, l.anchor_based, l.af_classification, l.af_regression, l.total
        )?;
    }
    Ok(())
}

pub fn read_loss_log(text: &str) -> Result<Vec<StepReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(Error::format("loss log", "unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::format("loss log", format!("expected 6 fields in {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::format("loss log", e.to_string()));
            Ok(StepReport {
                iteration: f[0].parse().map_err(|_| Error::format("loss log", format!("bad iteration {}", f[0])))?,
                lr: num(f[1])?,
                loss: LossReport {
                    anchor_based: num(f[2])?,
                    af_classification: num(f[3])?,
                    af_regression: num(f[4])?,
                    total: num(f[5])?,
                },
            })
        })
        .collect()
}
