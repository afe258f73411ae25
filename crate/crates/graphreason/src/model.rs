//! The full iterative model: a plain feed-forward head, a spatial-memory
//! module, a graph-reasoning module, and the glue that rolls them out for
//! several refinement rounds and fuses every round's predictions.
//!
//! Rollout structure for the full variant with `I` iterations:
//!
//! ```text
//! plain -> local_1 -> local_2 -> ... -> local_I  \
//!      \-> global_1 -> global_2 -> ... -> global_I -> fused
//! ```
//!
//! Each module chains on its *own* previous logits (both start from the
//! plain head); from the second iteration on, an optional cross-feed mixes
//! the sibling chain's logits into each module's input. The fused output
//! is a per-region attention-weighted combination of every round.
//!
//! Training puts a classification loss on every round. Module rounds can
//! down-weight regions the previous round already predicted confidently:
//! `w_r = max(1 - p_prev(y_r), floor)`, normalized to sum 1 over
//! the scene. The first and fused terms always use uniform weights.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::geometry::{
    build_spatial_adjacency, coverage_weights, CoverageWeights, KernelConfig, PixelBox,
    SpatialEdge,
};
use crate::global::GlobalModule;
use crate::kg::{KgError, KnowledgeGraph};
use crate::local::LocalModule;
use crate::scenes::Scene;
use crate::tensor::kernels::softmax_row;
use crate::tensor::params::{kaiming_std, Binder, ParamId, ParamSet};
use crate::tensor::{Result, Tensor, TensorError};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Nonlinearity for recurrent candidate states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

/// Which prediction modules take part in the rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain head only.
    Baseline,
    /// Plain head plus the spatial-memory module.
    LocalOnly,
    /// Plain head plus the graph-reasoning module.
    GlobalOnly,
    /// Both modules with optional cross-feed.
    Full,
}

impl Variant {
    pub fn has_local(&self) -> bool {
        matches!(self, Variant::LocalOnly | Variant::Full)
    }

    pub fn has_global(&self) -> bool {
        matches!(self, Variant::GlobalOnly | Variant::Full)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::LocalOnly => "local",
            Variant::GlobalOnly => "global",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "baseline" => Some(Variant::Baseline),
            "local" => Some(Variant::LocalOnly),
            "global" => Some(Variant::GlobalOnly),
            "full" => Some(Variant::Full),
            _ => None,
        }
    }

    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::LocalOnly,
        Variant::GlobalOnly,
        Variant::Full,
    ];
}

/// Switches that remove one ingredient at a time, for ablation studies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Use uniform region weights for every loss term.
    pub no_reweight: bool,
    /// Keep the chains independent even when both modules run.
    pub no_crossfeed: bool,
    /// Drop the region-graph path of the reasoner.
    pub no_spatial_path: bool,
    /// Drop the class-graph path of the reasoner.
    pub no_semantic_path: bool,
    /// Local module reads the raw features; nothing is written back.
    pub no_spatial_memory: bool,
    /// Graph module re-encodes from scratch each round (no recurrence).
    pub no_global_memory: bool,
    /// Skip graph propagation entirely; predict from the encoded rows.
    pub no_graph_reasoner: bool,
    /// Classify each region from its own crop without context convolutions.
    pub no_local_context: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        *self != Ablations::default()
    }

    /// `(flag name, set)` pairs, stable order.
    pub fn flags(&self) -> Vec<(&'static str, bool)> {
        vec![
            ("no_reweight", self.no_reweight),
            ("no_crossfeed", self.no_crossfeed),
            ("no_spatial_path", self.no_spatial_path),
            ("no_semantic_path", self.no_semantic_path),
            ("no_spatial_memory", self.no_spatial_memory),
            ("no_global_memory", self.no_global_memory),
            ("no_graph_reasoner", self.no_graph_reasoner),
            ("no_local_context", self.no_local_context),
        ]
    }

    pub fn set(&mut self, name: &str, value: bool) -> bool {
        match name {
            "no_reweight" => self.no_reweight = value,
            "no_crossfeed" => self.no_crossfeed = value,
            "no_spatial_path" => self.no_spatial_path = value,
            "no_semantic_path" => self.no_semantic_path = value,
            "no_spatial_memory" => self.no_spatial_memory = value,
            "no_global_memory" => self.no_global_memory = value,
            "no_graph_reasoner" => self.no_graph_reasoner = value,
            "no_local_context" => self.no_local_context = value,
            _ => return false,
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Channels of the backbone feature grid.
    pub feat_channels: usize,
    /// Feature grid height/width.
    pub grid: (usize, usize),
    /// Channels of the spatial memory.
    pub mem_channels: usize,
    /// Channels of the local context convolutions.
    pub conv_channels: usize,
    /// Width of the fully connected trunk in each head.
    pub fc_width: usize,
    /// Side length of region crops.
    pub crop: usize,
    /// Refinement rounds per module.
    pub iterations: usize,
    /// Row width of the graph memory.
    pub graph_dim: usize,
    /// Propagation rounds inside the reasoner.
    pub graph_stacks: usize,
    /// Distance-kernel bandwidth for the region graph, in grid units.
    pub kernel_bandwidth: f64,
    /// Floor for confidence-based region re-weighting; 1.0 means uniform.
    pub reweight_floor: f64,
    pub variant: Variant,
    pub ablations: Ablations,
    pub candidate_act: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 8,
            feat_channels: 8,
            grid: (12, 12),
            mem_channels: 16,
            conv_channels: 16,
            fc_width: 32,
            crop: 7,
            iterations: 2,
            graph_dim: 16,
            graph_stacks: 3,
            kernel_bandwidth: 2.0,
            reweight_floor: 0.5,
            variant: Variant::Full,
            ablations: Ablations::default(),
            candidate_act: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| -> Result<()> {
            Err(TensorError::Invalid {
                op: "model config",
                msg,
            })
        };
        for (name, v) in [
            ("classes", self.classes),
            ("feat_channels", self.feat_channels),
            ("grid height", self.grid.0),
            ("grid width", self.grid.1),
            ("mem_channels", self.mem_channels),
            ("conv_channels", self.conv_channels),
            ("fc_width", self.fc_width),
            ("crop", self.crop),
            ("iterations", self.iterations),
            ("graph_dim", self.graph_dim),
            ("graph_stacks", self.graph_stacks),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if !(self.kernel_bandwidth.is_finite() && self.kernel_bandwidth > 0.0) {
            return bad(format!("kernel_bandwidth {} must be positive", self.kernel_bandwidth));
        }
        if !(self.reweight_floor > 0.0 && self.reweight_floor <= 1.0) {
            return bad(format!(
                "reweight_floor {} outside (0, 1]",
                self.reweight_floor
            ));
        }
        let a = &self.ablations;
        if !self.variant.has_local() && (a.no_spatial_memory || a.no_local_context) {
            return bad(format!(
                "local-module ablation set but variant '{}' has no local module",
                self.variant.name()
            ));
        }
        if !self.variant.has_global()
            && (a.no_global_memory || a.no_graph_reasoner || a.no_spatial_path || a.no_semantic_path)
        {
            return bad(format!(
                "graph-module ablation set but variant '{}' has no graph module",
                self.variant.name()
            ));
        }
        if self.variant != Variant::Full && a.no_crossfeed {
            return bad(format!(
                "no_crossfeed set but variant '{}' never cross-feeds",
                self.variant.name()
            ));
        }
        if self.variant.has_global() && !a.no_graph_reasoner && a.no_spatial_path && a.no_semantic_path
        {
            return bad(
                "no_spatial_path and no_semantic_path together leave the reasoner \
                 with nothing to propagate; use no_graph_reasoner instead"
                    .into(),
            );
        }
        if a.no_graph_reasoner && (a.no_spatial_path || a.no_semantic_path) {
            return bad(
                "path ablations are redundant when no_graph_reasoner already removes them".into(),
            );
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// heads
// ---------------------------------------------------------------------------

/// Direct per-region classifier on pooled crop features; the starting
/// point of every chain and the first fusion input.
struct PlainHead {
    fc_w: ParamId,
    fc_b: ParamId,
    head_cls_w: ParamId,
    head_cls_b: ParamId,
    head_att_w: ParamId,
    head_att_b: ParamId,
}

impl PlainHead {
    fn new(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<PlainHead> {
        let dh = cfg.feat_channels;
        let f = cfg.fc_width;
        let c = cfg.classes;
        Ok(PlainHead {
            fc_w: params.add_normal("plain.fc.w", &[dh, f], kaiming_std(dh), rng)?,
            fc_b: params.add_zeros("plain.fc.b", &[f])?,
            head_cls_w: params.add_normal(
                "plain.head_cls.w",
                &[f, c],
                crate::tensor::params::xavier_std(f, c),
                rng,
            )?,
            head_cls_b: params.add_zeros("plain.head_cls.b", &[c])?,
            head_att_w: params.add_zeros("plain.head_att.w", &[f, 1])?,
            head_att_b: params.add_zeros("plain.head_att.b", &[1])?,
        })
    }

    fn forward(&self, b: &Binder, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let regions = pooled.shape()[0];
        let h = pooled
            .matmul(&b.get(self.fc_w))?
            .add_row_vec(&b.get(self.fc_b))?
            .relu();
        let logits = h
            .matmul(&b.get(self.head_cls_w))?
            .add_row_vec(&b.get(self.head_cls_b))?;
        let att = h
            .matmul(&b.get(self.head_att_w))?
            .add_row_vec(&b.get(self.head_att_b))?
            .reshape(&[regions])?;
        Ok((logits, att))
    }
}

/// Learned mixing of the two chains' logits from the second iteration on.
/// Each projection maps `concat(own, sibling)` (`R x 2C`) back to `R x C`
/// and starts as an exact pass-through of the module's own logits.
struct CrossFeed {
    local_in_w: ParamId,
    global_in_w: ParamId,
}

impl CrossFeed {
    fn new(cfg: &ModelConfig, params: &mut ParamSet) -> Result<CrossFeed> {
        let c = cfg.classes;
        let mut passthrough = vec![0.0; 2 * c * c];
        for i in 0..c {
            passthrough[i * c + i] = 1.0;
        }
        Ok(CrossFeed {
            local_in_w: params.add("cross.local_in.w", &[2 * c, c], passthrough.clone())?,
            global_in_w: params.add("cross.global_in.w", &[2 * c, c], passthrough)?,
        })
    }

    fn mix(&self, b: &Binder, own: &Tensor, sibling: &Tensor, local: bool) -> Result<Tensor> {
        let w = if local {
            self.local_in_w
        } else {
            self.global_in_w
        };
        Tensor::concat_last(&[own, sibling])?.matmul(&b.get(w))
    }
}

// ---------------------------------------------------------------------------
// prepared inputs
// ---------------------------------------------------------------------------

/// Knowledge graph in the ready-to-propagate form: inverse types added,
/// rows normalized, matrices extracted in sorted type order.
#[derive(Debug, Clone)]
pub struct PreparedKg {
    pub classes: usize,
    pub type_names: Vec<String>,
    /// One row-normalized `C x C` matrix per type, matching `type_names`.
    pub mats: Vec<Vec<f64>>,
}

impl PreparedKg {
    pub fn new(kg: &KnowledgeGraph) -> std::result::Result<PreparedKg, KgError> {
        let mut ready = kg.clone();
        ready.add_inverse_edges();
        let ready = ready.row_normalized();
        ready.validate_ready()?;
        let type_names: Vec<String> = ready.edge_types().map(str::to_owned).collect();
        let mats = type_names
            .iter()
            .map(|t| ready.matrix(t).expect("listed type").as_slice().to_vec())
            .collect();
        Ok(PreparedKg {
            classes: ready.classes().len(),
            type_names,
            mats,
        })
    }
}

/// Per-scene constants shared by every forward pass: feature grid, region
/// boxes in grid coordinates, labels, region-graph adjacency, and cell
/// coverage for memory writes.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: String,
    pub feat_shape: [usize; 3],
    pub features: Vec<f64>,
    pub boxes: Vec<PixelBox>,
    pub labels: Vec<usize>,
    /// Five `R x R` matrices in [`SpatialEdge::ALL`] order.
    pub adjacency: Vec<Vec<f64>>,
    pub coverage: Arc<CoverageWeights>,
}

impl PreparedScene {
    pub fn new(scene: &Scene, kernel: &KernelConfig) -> Result<PreparedScene> {
        let boxes = scene
            .regions
            .iter()
            .map(|r| r.bx)
            .collect::<Vec<_>>();
        Self::with_boxes(scene, &boxes, scene.labels(), kernel)
    }

    /// Prepare with replacement regions (e.g. proposal boxes), given in
    /// scene coordinates with one label each.
    pub fn with_boxes(
        scene: &Scene,
        scene_boxes: &[PixelBox],
        labels: Vec<usize>,
        kernel: &KernelConfig,
    ) -> Result<PreparedScene> {
        if scene_boxes.is_empty() {
            return Err(TensorError::Invalid {
                op: "prepared scene",
                msg: format!("scene {} has no regions", scene.id),
            });
        }
        if scene_boxes.len() != labels.len() {
            return Err(TensorError::Invalid {
                op: "prepared scene",
                msg: format!(
                    "{} boxes vs {} labels in scene {}",
                    scene_boxes.len(),
                    labels.len(),
                    scene.id
                ),
            });
        }
        let (gh, gw) = scene.grid;
        let sx = gw as f64 / scene.size.1;
        let sy = gh as f64 / scene.size.0;
        let boxes: Vec<PixelBox> = scene_boxes.iter().map(|b| b.scaled(sx, sy)).collect();
        let adj = build_spatial_adjacency(&boxes, kernel)?;
        let adjacency = SpatialEdge::ALL
            .iter()
            .map(|e| adj.mat(*e).to_vec())
            .collect();
        let coverage = Arc::new(coverage_weights(
            &boxes,
            (gh, gw),
            (gh as f64, gw as f64),
        )?);
        Ok(PreparedScene {
            id: scene.id.clone(),
            feat_shape: [gh, gw, scene.channels],
            features: scene.features.clone(),
            boxes,
            labels,
            adjacency,
            coverage,
        })
    }

    pub fn regions(&self) -> usize {
        self.boxes.len()
    }
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

/// Which head produced a prediction record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Plain,
    Local(usize),
    Global(usize),
}

impl Source {
    pub fn name(&self) -> String {
        match self {
            Source::Plain => "plain".into(),
            Source::Local(i) => format!("local{i}"),
            Source::Global(i) => format!("global{i}"),
        }
    }
}

/// One prediction round: logits (`R x C`) and fusion attention (`R`).
pub struct Record {
    pub source: Source,
    pub logits: Tensor,
    pub att: Tensor,
}

/// The full forward pass over one scene.
pub struct Rollout {
    pub records: Vec<Record>,
    /// Attention-fused logits over all records.
    pub fused: Tensor,
}

impl Rollout {
    /// Softmax probabilities of the fused logits, row-major `R x C`.
    pub fn fused_probs(&self) -> Vec<f64> {
        probs_of(&self.fused.value(), self.fused.shape()[1])
    }

    /// Per-record fusion weight rows (records-major, region-minor).
    pub fn fusion_weights(&self) -> Result<Vec<Vec<f64>>> {
        let atts: Vec<Tensor> = self.records.iter().map(|r| r.att.clone()).collect();
        Tensor::fusion_weights(&atts)
    }
}

fn probs_of(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        out.extend(softmax_row(row));
    }
    out
}

/// Confidence-based region weights: `max(1 - p_prev(true class), floor)`
/// per region, normalized to sum 1. With `floor == 1.0` this reduces to
/// exactly uniform weights.
pub fn reweight(prev_logits: &[f64], classes: usize, labels: &[usize], floor: f64) -> Vec<f64> {
    let probs = probs_of(prev_logits, classes);
    let raw: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| (1.0 - probs[r * classes + y]).max(floor))
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

pub fn uniform_weights(regions: usize) -> Vec<f64> {
    vec![1.0 / regions as f64; regions]
}

/// Scalar loss plus the per-term values behind it.
pub struct LossBreakdown {
    pub total: Tensor,
    /// `(term name, value)` in rollout order, ending with `fused`.
    pub terms: Vec<(String, f64)>,
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

pub struct Model {
    pub cfg: ModelConfig,
    plain: PlainHead,
    local: Option<LocalModule>,
    global: Option<GlobalModule>,
    cross: Option<CrossFeed>,
    kg: Option<PreparedKg>,
}

impl Model {
    /// Build all parameters. `kg` is required whenever the variant includes
    /// the graph module and its semantic path is active.
    pub fn new(
        cfg: ModelConfig,
        kg: Option<PreparedKg>,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Model> {
        cfg.validate()?;
        let needs_semantic = cfg.variant.has_global()
            && !cfg.ablations.no_graph_reasoner
            && !cfg.ablations.no_semantic_path;
        if needs_semantic {
            match &kg {
                None => {
                    return Err(TensorError::Invalid {
                        op: "model",
                        msg: "graph module needs a knowledge graph (none provided)".into(),
                    })
                }
                Some(k) if k.classes != cfg.classes => {
                    return Err(TensorError::Invalid {
                        op: "model",
                        msg: format!(
                            "knowledge graph covers {} classes, model has {}",
                            k.classes, cfg.classes
                        ),
                    })
                }
                Some(k) if k.type_names.is_empty() => {
                    return Err(TensorError::Invalid {
                        op: "model",
                        msg: "knowledge graph has no edge types".into(),
                    })
                }
                _ => {}
            }
        }

        let plain = PlainHead::new(&cfg, params, rng)?;
        let local = if cfg.variant.has_local() {
            Some(LocalModule::new(&cfg, params, rng)?)
        } else {
            None
        };
        let global = if cfg.variant.has_global() {
            let names: Vec<String> = if needs_semantic {
                kg.as_ref().expect("checked above").type_names.clone()
            } else {
                Vec::new()
            };
            Some(GlobalModule::new(&cfg, &names, params, rng)?)
        } else {
            None
        };
        let cross = if cfg.variant == Variant::Full
            && cfg.iterations >= 2
            && !cfg.ablations.no_crossfeed
        {
            Some(CrossFeed::new(&cfg, params)?)
        } else {
            None
        };
        Ok(Model {
            cfg,
            plain,
            local,
            global,
            cross,
            kg: if needs_semantic { kg } else { None },
        })
    }

    /// Number of prediction records a rollout produces (before fusion).
    pub fn record_count(&self) -> usize {
        let mut n = 1;
        if self.local.is_some() {
            n += self.cfg.iterations;
        }
        if self.global.is_some() {
            n += self.cfg.iterations;
        }
        n
    }

    pub fn forward(&self, b: &Binder, scene: &PreparedScene) -> Result<Rollout> {
        let [gh, gw, dh] = scene.feat_shape;
        if (gh, gw) != self.cfg.grid || dh != self.cfg.feat_channels {
            return Err(TensorError::Invalid {
                op: "forward",
                msg: format!(
                    "scene {} grid {}x{}x{} does not match config {}x{}x{}",
                    scene.id, gh, gw, dh, self.cfg.grid.0, self.cfg.grid.1, self.cfg.feat_channels
                ),
            });
        }
        let regions = scene.regions();
        let classes = self.cfg.classes;
        if let Some(&bad) = scene.labels.iter().find(|&&y| y >= classes) {
            return Err(TensorError::ClassOutOfRange {
                op: "forward",
                index: bad,
                classes,
            });
        }
        let tape = b.tape();
        let features = tape.constant(&[gh, gw, dh], scene.features.clone())?;

        // Pooled per-region crop features, shared by the plain head and the
        // graph encoder.
        let crop = self.cfg.crop;
        let pooled_rows: Vec<Tensor> = scene
            .boxes
            .iter()
            .map(|bx| features.crop_and_resize(bx, crop, crop)?.mean_spatial())
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = pooled_rows.iter().collect();
        let pooled = Tensor::stack_rows(&refs)?;

        let (plain_logits, plain_att) = self.plain.forward(b, &pooled)?;
        let mut records = vec![Record {
            source: Source::Plain,
            logits: plain_logits.clone(),
            att: plain_att,
        }];

        let adj_tensors: Vec<Tensor> = if self.global.is_some() {
            scene
                .adjacency
                .iter()
                .map(|m| tape.constant(&[regions, regions], m.clone()))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let kg_tensors: Vec<Tensor> = match (&self.global, &self.kg) {
            (Some(_), Some(kg)) => kg
                .mats
                .iter()
                .map(|m| tape.constant(&[classes, classes], m.clone()))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };

        let mut local_mem = tape.zeros(&[gh, gw, self.cfg.mem_channels]);
        let mut global_mem = tape.zeros(&[regions, self.cfg.graph_dim]);
        let mut v_local = plain_logits.clone();
        let mut v_global = plain_logits;

        for i in 1..=self.cfg.iterations {
            let (in_local, in_global) = match (&self.cross, i >= 2) {
                (Some(cross), true) => (
                    cross.mix(b, &v_local, &v_global, true)?,
                    cross.mix(b, &v_global, &v_local, false)?,
                ),
                _ => (v_local.clone(), v_global.clone()),
            };
            if let Some(local) = &self.local {
                let (mem, logits, att) = local.iterate(
                    b,
                    &features,
                    &local_mem,
                    &in_local,
                    &scene.boxes,
                    &scene.coverage,
                )?;
                local_mem = mem;
                v_local = logits.clone();
                records.push(Record {
                    source: Source::Local(i),
                    logits,
                    att,
                });
            }
            if let Some(global) = &self.global {
                let probs = probs_of(&in_global.value(), classes);
                let (mem, logits, att) = global.iterate(
                    b,
                    &pooled,
                    &in_global,
                    &global_mem,
                    &adj_tensors,
                    &kg_tensors,
                    &probs,
                )?;
                global_mem = mem;
                v_global = logits.clone();
                records.push(Record {
                    source: Source::Global(i),
                    logits,
                    att,
                });
            }
        }

        let logit_refs: Vec<Tensor> = records.iter().map(|r| r.logits.clone()).collect();
        let att_refs: Vec<Tensor> = records.iter().map(|r| r.att.clone()).collect();
        let fused = Tensor::attention_fuse(&logit_refs, &att_refs)?;
        Ok(Rollout { records, fused })
    }

    /// The region weights each record's loss term will use: uniform for the
    /// plain head and any first round; re-weighted against the same chain's
    /// previous logits afterwards (unless ablated). Weights are treated as
    /// constants by the loss — no gradient flows through them.
    pub fn region_weights(&self, rollout: &Rollout, labels: &[usize]) -> Vec<Vec<f64>> {
        let regions = labels.len();
        let classes = self.cfg.classes;
        let uniform = uniform_weights(regions);
        let reweight_on = !self.cfg.ablations.no_reweight;

        let mut prev_local: Option<Vec<f64>> = None;
        let mut prev_global: Option<Vec<f64>> = None;
        let mut out = Vec::with_capacity(rollout.records.len());
        for rec in &rollout.records {
            let prev = match rec.source {
                Source::Plain => None,
                Source::Local(_) => prev_local.take(),
                Source::Global(_) => prev_global.take(),
            };
            out.push(match prev {
                Some(prev_logits) if reweight_on => {
                    reweight(&prev_logits, classes, labels, self.cfg.reweight_floor)
                }
                _ => uniform.clone(),
            });
            let value = rec.logits.value();
            match rec.source {
                Source::Plain => {
                    prev_local = Some(value.clone());
                    prev_global = Some(value);
                }
                Source::Local(_) => prev_local = Some(value),
                Source::Global(_) => prev_global = Some(value),
            }
        }
        out
    }

    /// Classification loss over every rollout record plus the fused output,
    /// with one explicit weight row per record; the fused term is always
    /// uniform.
    pub fn loss_with_weights(
        &self,
        rollout: &Rollout,
        labels: &[usize],
        weights: &[Vec<f64>],
    ) -> Result<LossBreakdown> {
        if weights.len() != rollout.records.len() {
            return Err(TensorError::Invalid {
                op: "loss",
                msg: format!(
                    "{} weight rows for {} records",
                    weights.len(),
                    rollout.records.len()
                ),
            });
        }
        let mut total: Option<Tensor> = None;
        let mut terms = Vec::with_capacity(rollout.records.len() + 1);
        let mut add_term = |name: String, t: Tensor, total: &mut Option<Tensor>| -> Result<()> {
            terms.push((name, t.scalar_value()));
            *total = Some(match total.take() {
                Some(acc) => acc.add(&t)?,
                None => t,
            });
            Ok(())
        };
        for (rec, w) in rollout.records.iter().zip(weights) {
            let loss = rec.logits.weighted_nll(labels, w)?;
            add_term(rec.source.name(), loss, &mut total)?;
        }
        let fused_loss = rollout
            .fused
            .weighted_nll(labels, &uniform_weights(labels.len()))?;
        add_term("fused".into(), fused_loss, &mut total)?;
        Ok(LossBreakdown {
            total: total.expect("at least the plain term"),
            terms,
        })
    }

    /// Classification loss over every rollout record plus the fused output.
    /// Module records from the second round on use confidence re-weighting
    /// against the same chain's previous logits (unless ablated); the plain,
    /// first-round, and fused terms use uniform weights.
    pub fn loss(&self, rollout: &Rollout, labels: &[usize]) -> Result<LossBreakdown> {
        let weights = self.region_weights(rollout, labels);
        self.loss_with_weights(rollout, labels, &weights)
    }
}
