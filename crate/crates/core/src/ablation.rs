//! The four-way comparison of branch and selection choices on the synthetic set.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic, Dataset, SynthConfig};
use crate::detector::{Branches, ModelParams};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, ImageDetections};
use crate::exec::Execution;
use crate::inference::{detect, DetectOptions};
use crate::train::{LossReport, Sample, SelectionMode, StepReport, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// RetinaNet-style baseline.
    AnchorBased,
    AfHeuristic,
    AfOnline,
    /// Both branches, online selection.
    Joint,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::AnchorBased, Variant::AfHeuristic, Variant::AfOnline, Variant::Joint];

    pub fn label(self) -> &'static str {
        match self {
            Variant::AnchorBased => "anchor-based",
            Variant::AfHeuristic => "anchor-free heuristic",
            Variant::AfOnline => "anchor-free online",
            Variant::Joint => "joint online",
        }
    }

    pub fn configure(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        (cfg.model.branches, cfg.selection) = match self {
            Variant::AnchorBased => (Branches::AnchorBased, base.selection),
            Variant::AfHeuristic => (Branches::AnchorFree, SelectionMode::Heuristic),
            Variant::AfOnline => (Branches::AnchorFree, SelectionMode::Online),
            Variant::Joint => (Branches::Both, SelectionMode::Online),
        };
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub train_set: SynthConfig,
    pub test_set: SynthConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train_set: SynthConfig {
                num_images: 500,
                seed: 1000,
                ..SynthConfig::default()
            },
            test_set: SynthConfig {
                num_images: 100,
                seed: 2000,
                first_id: 500,
                ..SynthConfig::default()
            },
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl AblationConfig {
    /// Three consecutive training seeds starting at `seed`.
    pub fn with_base_seed(seed: u64) -> Self {
        Self {
            seeds: vec![seed, seed + 1, seed + 2],
            ..Self::default()
        }
    }
}

/// Outcome of one training run and its evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub eval: EvalReport,
    pub final_loss: LossReport,
    pub train_seconds: f64,
    #[serde(skip)]
    pub model: Vec<u8>,
    #[serde(skip)]
    pub loss_log: Vec<StepReport>,
}

/// Detections for every image of a dataset, in dataset order.
pub fn detect_dataset(
    model: &ModelParams<f32>,
    data: &Dataset,
    options: &DetectOptions,
    exec: Execution,
) -> Result<Vec<ImageDetections>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    exec.map(&idx, |&n| {
        Ok(ImageDetections {
            image_id: data.annotations.images[n].id,
            detections: detect(model, &data.images[n].to_tensor(), options)?,
        })
    })
    .into_iter()
    .collect()
}

/// Train one configuration single-threaded and evaluate it on `test`.
pub fn train_and_evaluate(cfg: &TrainConfig, train: &[Sample], test: &Dataset, variant: Variant) -> Result<RunResult> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), Execution::Sequential)?;
    let log = trainer.run(train, |s| {
        if s.iteration % 250 == 0 {
            log::info!("{} seed {}: iteration {} loss {:.4}", variant.label(), cfg.seed, s.iteration, s.loss.total);
        }
    })?;
    let train_seconds = start.elapsed().as_secs_f64();
    let model = trainer.into_params();
    let dets = detect_dataset(&model, test, &DetectOptions::default(), Execution::Sequential)?;
    let eval = evaluate(&dets, &test.annotations, Execution::Sequential)?;
    let mut bytes = Vec::new();
    model.write_to(&mut bytes)?;
    Ok(RunResult {
        variant,
        seed: cfg.seed,
        eval,
        final_loss: log.last().map(|s| s.loss).unwrap_or_default(),
        train_seconds,
        model: bytes,
        loss_log: log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub ap: Vec<f64>,
    pub median_ap: f64,
    pub median_ap50: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<VariantSummary>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationReport {
    pub fn summary_for(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    pub fn run(&self, variant: Variant, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }
}

impl fmt::Display for AblationReport {
    /// Timing is left out so repeated runs print identical tables.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24}{:>6}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}",
            "variant", "seed", "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"
        )?;
        for r in &self.runs {
            let e = &r.eval;
            writeln!(
                f,
                "{:<24}{:>6}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>8.4}{:>8.4}",
                r.variant.label(),
                r.seed,
                e.ap,
                e.ap50,
                e.ap75,
                e.ap_small,
                e.ap_medium,
                e.ap_large
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<24}{:>14}{:>14}", "variant", "median AP", "median AP50")?;
        for s in &self.summary {
            writeln!(f, "{:<24}{:>14.4}{:>14.4}", s.variant.label(), s.median_ap, s.median_ap50)?;
        }
        Ok(())
    }
}

/// Generate both splits, then train every (variant, seed) pair. Runs fan out over
/// `exec`; each run is itself single-threaded, so results do not depend on it.
pub fn run_ablation(cfg: &AblationConfig, exec: Execution) -> Result<AblationReport> {
    let train = make_synthetic(&cfg.train_set)?.samples()?;
    let test = make_synthetic(&cfg.test_set)?;
    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = exec
        .map(&jobs, |&(v, seed)| train_and_evaluate(&v.configure(&cfg.train, seed), &train, &test, v))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let summary = cfg
        .variants
        .iter()
        .map(|&v| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
            let ap: Vec<f64> = mine.iter().map(|r| r.eval.ap).collect();
            VariantSummary {
                variant: v,
                median_ap: median(ap.clone()),
                median_ap50: median(mine.iter().map(|r| r.eval.ap50).collect()),
                ap,
            }
        })
        .collect();
    Ok(AblationReport { runs, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }

    #[test]
    fn variants_configure_branches_and_selection() {
        let base = TrainConfig::default();
        let c = Variant::AfHeuristic.configure(&base, 9);
        assert_eq!((c.seed, c.model.branches, c.selection), (9, Branches::AnchorFree, SelectionMode::Heuristic));
        let c = Variant::Joint.configure(&base, 1);
        assert_eq!((c.model.branches, c.selection, c.lambda), (Branches::Both, SelectionMode::Online, 0.5));
        assert_eq!(Variant::AnchorBased.configure(&base, 1).model.branches, Branches::AnchorBased);
    }

    #[test]
    fn tiny_ablation_is_deterministic() {
        let mut cfg = AblationConfig::default();
        cfg.train_set.num_images = 4;
        cfg.test_set.num_images = 2;
        cfg.train.iterations = 2;
        cfg.train.batch_size = 2;
        cfg.seeds = vec![0, 1];
        let a = run_ablation(&cfg, Execution::Sequential).unwrap();
        let b = run_ablation(&cfg, Execution::Parallel).unwrap();
        assert_eq!(a.runs.len(), 8);
        assert_eq!(a.to_string(), b.to_string());
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.model, y.model);
            assert_eq!(x.loss_log, y.loss_log);
        }
    }
}
