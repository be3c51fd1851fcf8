//! The toy detector: a strided conv backbone, a top-down feature pyramid, shared
//! classification and regression subnets, and per-branch output layers.
//!
//! The anchor-free branch adds exactly two conv layers on top of the subnets: a
//! `3x3` conv with `K` filters read through a sigmoid, and a `3x3` conv with four
//! filters read through a ReLU.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSpec;
use crate::error::{Error, Result};
use crate::geometry::PyramidSpec;
use crate::nn::{Graph, NodeId, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    AnchorFree,
    AnchorBased,
    Both,
}

impl Branches {
    pub fn anchor_free(self) -> bool {
        matches!(self, Branches::AnchorFree | Branches::Both)
    }

    pub fn anchor_based(self) -> bool {
        matches!(self, Branches::AnchorBased | Branches::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub min_level: u32,
    pub max_level: u32,
    /// Output channels of backbone stage `l` (stride `2^l`) for `l = 1..`; the
    /// last entry repeats for deeper stages.
    pub backbone_channels: Vec<usize>,
    pub feature_channels: usize,
    /// `3x3` conv + ReLU layers in each subnet before the output layers.
    pub head_depth: usize,
    pub branches: Branches,
    pub anchors: AnchorSpec,
    /// Initial foreground probability of the classification outputs.
    pub prior_prob: f64,
    /// Initial bias of the anchor-free regression outputs.
    pub regression_bias: f64,
    /// Standard deviation of the output-layer weights.
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            min_level: 3,
            max_level: 5,
            backbone_channels: vec![8, 16, 24, 32, 32],
            feature_channels: 16,
            head_depth: 1,
            branches: Branches::AnchorFree,
            anchors: AnchorSpec {
                base_multiplier: 1.0,
                ..AnchorSpec::default()
            },
            prior_prob: 0.01,
            regression_bias: 0.1,
            head_init_std: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_channels == 0 || self.backbone_channels.is_empty() {
            return Err(Error::arg("class count, feature width and backbone widths must be non-empty"));
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::arg("backbone widths must be positive"));
        }
        if self.min_level == 0 || self.min_level > self.max_level || self.max_level > 10 {
            return Err(Error::arg(format!("unsupported level range {}..={}", self.min_level, self.max_level)));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::arg("prior probability must lie in (0, 1)"));
        }
        if !(self.head_init_std >= 0.0) {
            return Err(Error::arg("init std must be non-negative"));
        }
        if self.branches.anchor_based() {
            self.anchors.validate()?;
        }
        Ok(())
    }

    pub fn stage_channels(&self, level: u32) -> usize {
        let i = (level as usize - 1).min(self.backbone_channels.len() - 1);
        self.backbone_channels[i]
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchors.per_location()
    }

    pub fn pyramid(&self, image_height: usize, image_width: usize) -> PyramidSpec {
        let m = 1usize << self.max_level;
        PyramidSpec {
            min_level: self.min_level,
            max_level: self.max_level,
            image_height: image_height.div_ceil(m) * m,
            image_width: image_width.div_ceil(m) * m,
        }
    }
}

/// `-ln((1 - pi) / pi)`: the bias that makes a sigmoid output `pi`.
pub fn prior_bias(prior_prob: f64) -> f64 {
    -((1.0 - prior_prob) / prior_prob).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvIds {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    /// Per backbone stage: the strided conv and, past the stem, a stride-1 conv.
    stages: Vec<(ConvIds, Option<ConvIds>)>,
    laterals: Vec<ConvIds>,
    smooth: Vec<ConvIds>,
    cls_subnet: Vec<ConvIds>,
    reg_subnet: Vec<ConvIds>,
    af_cls: Option<ConvIds>,
    af_reg: Option<ConvIds>,
    ab_cls: Option<ConvIds>,
    ab_reg: Option<ConvIds>,
}

enum Init {
    He,
    Gaussian(f64),
}

/// Named parameter tensors plus the configuration that defines their roles.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    layout: Layout,
}

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<(Init, f64)>,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init, bias: f64) -> ConvIds {
        self.names.push(format!("{name}.weight"));
        self.shapes.push(vec![cout, cin, k, k]);
        self.inits.push((init, 0.0));
        self.names.push(format!("{name}.bias"));
        self.shapes.push(vec![cout]);
        self.inits.push((Init::Gaussian(0.0), bias));
        ConvIds {
            weight: self.names.len() - 2,
            bias: self.names.len() - 1,
        }
    }
}

fn plan(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder::default();
    let f = cfg.feature_channels;
    let k = cfg.num_classes;
    let a = cfg.anchors_per_location();
    let mut stages = Vec::new();
    let mut cin = 3;
    for level in 1..=cfg.max_level {
        let c = cfg.stage_channels(level);
        let down = b.conv(&format!("backbone.stage{level}.down"), cin, c, 3, Init::He, 0.0);
        let refine = (level > 1).then(|| b.conv(&format!("backbone.stage{level}.conv"), c, c, 3, Init::He, 0.0));
        stages.push((down, refine));
        cin = c;
    }
    let mut laterals = Vec::new();
    let mut smooth = Vec::new();
    for level in cfg.min_level..=cfg.max_level {
        laterals.push(b.conv(&format!("fpn.lateral{level}"), cfg.stage_channels(level), f, 1, Init::He, 0.0));
    }
    for level in cfg.min_level..=cfg.max_level {
        smooth.push(b.conv(&format!("fpn.output{level}"), f, f, 3, Init::He, 0.0));
    }
    let cls_subnet = (0..cfg.head_depth)
        .map(|d| b.conv(&format!("head.cls_subnet{d}"), f, f, 3, Init::He, 0.0))
        .collect();
    let reg_subnet = (0..cfg.head_depth)
        .map(|d| b.conv(&format!("head.reg_subnet{d}"), f, f, 3, Init::He, 0.0))
        .collect();
    let std = cfg.head_init_std;
    let cls_bias = prior_bias(cfg.prior_prob);
    let (af_cls, af_reg) = if cfg.branches.anchor_free() {
        (
            Some(b.conv("head.af_cls", f, k, 3, Init::Gaussian(std), cls_bias)),
            Some(b.conv("head.af_reg", f, 4, 3, Init::Gaussian(std), cfg.regression_bias)),
        )
    } else {
        (None, None)
    };
    let (ab_cls, ab_reg) = if cfg.branches.anchor_based() {
        (
            Some(b.conv("head.ab_cls", f, a * k, 3, Init::Gaussian(std), cls_bias)),
            Some(b.conv("head.ab_reg", f, a * 4, 3, Init::Gaussian(std), 0.0)),
        )
    } else {
        (None, None)
    };
    (
        Layout {
            stages,
            laterals,
            smooth,
            cls_subnet,
            reg_subnet,
            af_cls,
            af_reg,
            ab_cls,
            ab_reg,
        },
        b,
    )
}

/// Fresh parameters: He-normal hidden layers, `N(0, head_init_std)` output layers,
/// prior-probability classification bias, and the configured regression bias.
/// Deterministic in `seed`.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let (layout, b) = plan(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(b.shapes.len());
    for (shape, (init, bias)) in b.shapes.iter().zip(&b.inits) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if shape.len() == 1 {
            vec![T::from_f64(*bias); n]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let std = match init {
                Init::He => (2.0 / fan_in as f64).sqrt(),
                Init::Gaussian(s) => *s,
            };
            if std > 0.0 {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            } else {
                vec![T::zero(); n]
            }
        };
        tensors.push(Tensor::from_vec(shape, data)?);
    }
    Ok(ModelParams {
        config: config.clone(),
        names: b.names,
        tensors,
        layout,
    })
}

/// Graph nodes holding one pyramid level's head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelNodes {
    pub level: u32,
    /// Anchor-free class logits, `K x H x W`.
    pub af_logits: Option<NodeId>,
    /// Anchor-free offsets after ReLU, `4 x H x W`.
    pub af_offsets: Option<NodeId>,
    /// Anchor-based class logits, `A*K x H x W`, channel `a * K + k`.
    pub ab_logits: Option<NodeId>,
    /// Anchor-based deltas, `A*4 x H x W`, channel `a * 4 + c`.
    pub ab_deltas: Option<NodeId>,
}

/// Per-level predictions of one image, converted to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction {
    pub level: u32,
    pub height: usize,
    pub width: usize,
    pub af_probs: Option<Vec<f64>>,
    pub af_offsets: Option<Vec<f64>>,
    /// `anchors x K`, anchors ordered `(i * W + j) * A + a`.
    pub ab_probs: Option<Vec<f64>>,
    /// `anchors x 4`.
    pub ab_deltas: Option<Vec<f64>>,
}

/// Reorder a channel-major `A*C x H x W` map into `(H*W*A) x C` anchor rows.
pub fn channels_to_anchor_rows(map: &[f64], per_location: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; map.len()];
    for a in 0..per_location {
        for c in 0..channels {
            let src = &map[(a * channels + c) * plane..(a * channels + c + 1) * plane];
            for (p, &v) in src.iter().enumerate() {
                out[(p * per_location + a) * channels + c] = v;
            }
        }
    }
    out
}

/// Inverse of [`channels_to_anchor_rows`].
pub fn anchor_rows_to_channels(rows: &[f64], per_location: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for p in 0..plane {
        for a in 0..per_location {
            for c in 0..channels {
                out[(a * channels + c) * plane + p] = rows[(p * per_location + a) * channels + c];
            }
        }
    }
    out
}

fn sigmoid_vec<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|&v| crate::losses::sigmoid(v.as_f64())).collect()
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

impl<T: Real> ModelParams<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Anchor-free output layers, `(classification, regression)`.
    pub fn af_head_ids(&self) -> Option<(ConvIds, ConvIds)> {
        self.layout.af_cls.zip(self.layout.af_reg)
    }

    /// Record the forward pass of one `3 x H x W` image. The image is zero-padded on
    /// the bottom/right to a multiple of `2^max_level`.
    pub fn build_graph(&self, image: &Tensor<T>) -> Result<(Graph<'_, T>, Vec<LevelNodes>)> {
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape(format!("expected a 3 x H x W image, got {:?}", image.shape())));
        }
        let cfg = &self.config;
        let image = image.pad_to_multiple(1 << cfg.max_level);
        let mut g = Graph::new(&self.tensors);
        let conv_relu = |g: &mut Graph<'_, T>, x: NodeId, c: ConvIds, stride: usize, pad: usize| {
            let y = g.conv(x, c.weight, c.bias, stride, pad);
            g.relu(y)
        };
        let mut x = g.input(image);
        let mut features = Vec::new();
        for (level, &(down, refine)) in (1..=cfg.max_level).zip(&self.layout.stages) {
            x = conv_relu(&mut g, x, down, 2, 1);
            if let Some(r) = refine {
                x = conv_relu(&mut g, x, r, 1, 1);
            }
            if level >= cfg.min_level {
                features.push(x);
            }
        }
        // Top-down: P_l = lateral(C_l) + up(P_{l+1}).
        let n = features.len();
        let mut merged: Vec<NodeId> = vec![0; n];
        for idx in (0..n).rev() {
            let lat = self.layout.laterals[idx];
            let l = g.conv(features[idx], lat.weight, lat.bias, 1, 0);
            merged[idx] = if idx + 1 < n {
                let up = g.upsample2x(merged[idx + 1]);
                g.add(l, up)
            } else {
                l
            };
        }
        let mut out = Vec::with_capacity(n);
        for (idx, level) in (cfg.min_level..=cfg.max_level).enumerate() {
            let s = self.layout.smooth[idx];
            let p = g.conv(merged[idx], s.weight, s.bias, 1, 1);
            let mut cls = p;
            for &c in &self.layout.cls_subnet {
                cls = conv_relu(&mut g, cls, c, 1, 1);
            }
            let mut reg = p;
            for &c in &self.layout.reg_subnet {
                reg = conv_relu(&mut g, reg, c, 1, 1);
            }
            let head = |g: &mut Graph<'_, T>, x: NodeId, c: Option<ConvIds>| c.map(|c| g.conv(x, c.weight, c.bias, 1, 1));
            let af_logits = head(&mut g, cls, self.layout.af_cls);
            let af_offsets = head(&mut g, reg, self.layout.af_reg).map(|r| g.relu(r));
            let ab_logits = head(&mut g, cls, self.layout.ab_cls);
            let ab_deltas = head(&mut g, reg, self.layout.ab_reg);
            out.push(LevelNodes {
                level,
                af_logits,
                af_offsets,
                ab_logits,
                ab_deltas,
            });
        }
        Ok((g, out))
    }

    /// Read predictions for every level out of a recorded graph.
    pub fn read_predictions(&self, g: &Graph<'_, T>, nodes: &[LevelNodes]) -> Vec<LevelPrediction> {
        let a = self.config.anchors_per_location();
        let k = self.config.num_classes;
        nodes
            .iter()
            .map(|ln| {
                let dims = ln
                    .af_logits
                    .or(ln.ab_logits)
                    .map(|id| g.value(id).chw())
                    .expect("at least one branch is enabled");
                let (height, width) = (dims.1, dims.2);
                let plane = height * width;
                LevelPrediction {
                    level: ln.level,
                    height,
                    width,
                    af_probs: ln.af_logits.map(|id| sigmoid_vec(g.value(id))),
                    af_offsets: ln.af_offsets.map(|id| to_f64(g.value(id))),
                    ab_probs: ln
                        .ab_logits
                        .map(|id| channels_to_anchor_rows(&sigmoid_vec(g.value(id)), a, k, plane)),
                    ab_deltas: ln
                        .ab_deltas
                        .map(|id| channels_to_anchor_rows(&to_f64(g.value(id)), a, 4, plane)),
                }
            })
            .collect()
    }

    /// Forward a batch of `3 x H x W` images; one prediction list per image.
    pub fn forward(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<LevelPrediction>>> {
        images
            .iter()
            .map(|img| {
                let (g, nodes) = self.build_graph(img)?;
                Ok(self.read_predictions(&g, &nodes))
            })
            .collect()
    }
}

const MAGIC: &[u8; 4] = b"FSAF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl<T: Real> ModelParams<T> {
    /// `FSAF`, version (u32 LE), manifest length (u32 LE), JSON manifest, then every
    /// tensor as little-endian f32 in manifest order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let manifest = Manifest {
            model: self.config.clone(),
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.num_scalars() * 4);
        for t in &self.tensors {
            for &v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::format("model file", "bad magic bytes"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::format("model file", format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let reference = build_model::<T>(&manifest.model, 0)?;
        if reference.names.len() != manifest.tensors.len() {
            return Err(Error::format("model file", "tensor count does not match the model config"));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for (entry, (name, t)) in manifest.tensors.iter().zip(reference.names.iter().zip(&reference.tensors)) {
            if &entry.name != name || entry.shape != t.shape() {
                return Err(Error::format("model file", format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            tensors.push(Tensor::from_vec(&entry.shape, data)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format("model file", format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            tensors,
            ..reference
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
