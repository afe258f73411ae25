//! Training and evaluation loops over prepared scenes.
//!
//! Each optimizer step runs one scene: build a fresh tape, roll the model
//! out, backpropagate the combined loss, and apply momentum SGD. Scene
//! order reshuffles every epoch from the run seed, so a `(seed, step)`
//! pair always sees the same scene.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::metrics::{evaluate, Metrics};
use crate::model::{Model, PreparedScene, Source};
use crate::scenes::sub_seed;
use crate::tensor::optim::{Sgd, SgdConfig};
use crate::tensor::params::{Binder, ParamSet};
use crate::tensor::{Precision, Tape, TensorError};

/// Salt for per-epoch shuffle streams.
const TAG_EPOCH: u64 = 0x45504f4348; // "EPOCH"

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total optimizer steps; one scene per step.
    pub steps: usize,
    pub optimizer: SgdConfig,
    /// Shuffle stream seed (parameter init happens before training).
    pub seed: u64,
    /// Emit a log row every this many steps (and at the last step);
    /// 0 logs only the last step.
    pub log_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            optimizer: SgdConfig::default(),
            seed: 7,
            log_every: 100,
            precision: Precision::F32,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone)]
pub struct TrainRow {
    pub step: usize,
    pub scene: String,
    pub lr: f64,
    pub total: f64,
    /// Per-term losses in rollout order, ending with `fused`.
    pub terms: Vec<(String, f64)>,
    /// Mean fusion weight per prediction source over the scene's regions.
    pub fusion: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub steps_run: usize,
    pub final_loss: f64,
}

/// Run `cfg.steps` optimizer steps starting from `start_step` (nonzero when
/// resuming from a checkpoint). `opt` carries momentum state across calls.
/// Aborts with an error if the loss ever turns non-finite.
pub fn train(
    model: &Model,
    params: &mut ParamSet,
    opt: &mut Sgd,
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    start_step: usize,
) -> Result<TrainReport, TensorError> {
    if scenes.is_empty() {
        return Err(TensorError::Invalid {
            op: "train",
            msg: "no training scenes".into(),
        });
    }
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = Vec::new();
    for step in start_step..cfg.steps {
        let epoch = step / scenes.len();
        let slot = step % scenes.len();
        if slot == 0 || order.is_empty() {
            order = (0..scenes.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, TAG_EPOCH, epoch as u64));
            order.shuffle(&mut rng);
        }
        let scene = &scenes[order[slot]];

        let tape = Tape::new(cfg.precision);
        let binder = Binder::new(&tape, params);
        let rollout = model.forward(&binder, scene)?;
        let breakdown = model.loss(&rollout, &scene.labels)?;
        let total = breakdown.total.scalar_value();
        if !total.is_finite() {
            return Err(TensorError::Invalid {
                op: "train",
                msg: format!("non-finite loss {total} at step {step} on scene {}", scene.id),
            });
        }
        let last = step + 1 == cfg.steps;
        let log_now = last || (cfg.log_every > 0 && step % cfg.log_every == 0);
        if log_now {
            report.rows.push(TrainRow {
                step,
                scene: scene.id.clone(),
                lr: opt.lr_at(step),
                total,
                terms: breakdown.terms.clone(),
                fusion: mean_fusion(&rollout.records, &rollout.fusion_weights()?),
            });
        }
        tape.backward(&breakdown.total, params)?;
        opt.step(params, step)?;
        report.steps_run += 1;
        report.final_loss = total;
    }
    Ok(report)
}

fn mean_fusion(
    records: &[crate::model::Record],
    weights: &[Vec<f64>],
) -> Vec<(String, f64)> {
    records
        .iter()
        .zip(weights)
        .map(|(rec, row)| {
            let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
            (rec.source.name(), mean)
        })
        .collect()
}

/// Fused-output probabilities and labels pooled over scenes.
pub struct EvalOutput {
    pub metrics: Metrics,
    /// Mean fusion weight per source over all evaluated regions.
    pub fusion: Vec<(String, f64)>,
    pub scenes: usize,
}

/// Run the model over every scene and pool region predictions into ranked
/// retrieval metrics on the fused output.
pub fn evaluate_model(
    model: &Model,
    params: &ParamSet,
    scenes: &[PreparedScene],
    precision: Precision,
) -> Result<EvalOutput, TensorError> {
    if scenes.is_empty() {
        return Err(TensorError::Invalid {
            op: "evaluate",
            msg: "no scenes to evaluate".into(),
        });
    }
    let classes = model.cfg.classes;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut fusion_sums: Vec<(String, f64)> = Vec::new();
    let mut fusion_regions = 0usize;
    for scene in scenes {
        let tape = Tape::new(precision);
        let binder = Binder::new(&tape, params);
        let rollout = model.forward(&binder, scene)?;
        probs.extend(rollout.fused_probs());
        labels.extend_from_slice(&scene.labels);
        let w = rollout.fusion_weights()?;
        if fusion_sums.is_empty() {
            fusion_sums = rollout
                .records
                .iter()
                .map(|r| (r.source.name(), 0.0))
                .collect();
        }
        for (sum, row) in fusion_sums.iter_mut().zip(&w) {
            sum.1 += row.iter().sum::<f64>();
        }
        fusion_regions += scene.regions();
    }
    let fusion = fusion_sums
        .into_iter()
        .map(|(name, sum)| (name, sum / fusion_regions.max(1) as f64))
        .collect();
    Ok(EvalOutput {
        metrics: evaluate(&probs, &labels, classes),
        fusion,
        scenes: scenes.len(),
    })
}

/// Names of every prediction source in rollout order (for table headers).
pub fn source_names(model: &Model) -> Vec<String> {
    let mut names = vec![Source::Plain.name()];
    for i in 1..=model.cfg.iterations {
        if model.cfg.variant.has_local() {
            names.push(Source::Local(i).name());
        }
        if model.cfg.variant.has_global() {
            names.push(Source::Global(i).name());
        }
    }
    names
}
