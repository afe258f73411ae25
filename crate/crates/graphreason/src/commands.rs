//! Library implementations of the command-line verbs: `gradcheck`,
//! `gen-data`, `train`, `eval`, `sweep`, and `report`.
//!
//! Each verb is a plain function over parsed flags so tests and examples
//! can drive it in-process; the binary is a thin argument parser on top.
//! Every artifact a verb writes starts with a `# config <digest>` line
//! tying it to the exact resolved configuration, and anything that reads
//! an artifact refuses a digest that does not match its own config.
//!
//! Scene evaluation fans out across worker threads, capped by the
//! `GRAPHREASON_THREADS` environment variable; results are merged in
//! scene order so the thread count never changes any output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::geometry::KernelConfig;
use crate::gradsuite::gradient_suite;
use crate::kg::ClassVocabulary;
use crate::metrics::{evaluate, Metrics};
use crate::model::{Model, PreparedKg, PreparedScene};
use crate::scenes::{
    class_names, default_knowledge_graph, keep_mask, region_proposals, sub_seed, Dataset,
    DropMode, Scene, Split,
};
use crate::tensor::optim::Sgd;
use crate::tensor::params::{Binder, ParamSet};
use crate::tensor::{Precision, Tape, TensorError};
use crate::train::{train, TrainRow};

/// The four flags shared by every verb.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    fn load_config(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), self.seed)?)
    }

    fn need_out(&self, verb: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| anyhow!("{verb} needs --out DIR"))
    }

    fn need_checkpoint(&self, verb: &str) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| anyhow!("{verb} needs --checkpoint PATH"))
    }
}

/// Worker-thread cap: `GRAPHREASON_THREADS` when set (must be a positive
/// integer), otherwise the machine's available parallelism.
pub fn thread_limit() -> Result<usize> {
    match std::env::var("GRAPHREASON_THREADS") {
        Ok(s) => {
            let n: usize = s
                .trim()
                .parse()
                .map_err(|_| anyhow!("GRAPHREASON_THREADS must be a positive integer, got '{s}'"))?;
            if n == 0 {
                bail!("GRAPHREASON_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(std::env::VarError::NotPresent) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
        Err(std::env::VarError::NotUnicode(_)) => {
            bail!("GRAPHREASON_THREADS is not valid unicode")
        }
    }
}

const TAG_INIT: u64 = 0x494e4954; // "INIT"

/// Build the model and its fresh parameters exactly as `train` would, so
/// a checkpoint restores into an identical parameter layout.
pub fn build_model(cfg: &RunConfig) -> Result<(Model, ParamSet)> {
    let vocab = ClassVocabulary::new(class_names(cfg.spec.classes))?;
    let kg = PreparedKg::new(&default_knowledge_graph(&vocab))?;
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.train.seed, TAG_INIT, 0));
    let model = Model::new(cfg.model.clone(), Some(kg), &mut params, &mut rng)?;
    Ok((model, params))
}

/// Prepare every scene of a split for the model (grid-frame boxes,
/// spatial adjacency, coverage weights).
pub fn prepare_split(ds: &Dataset, split: Split, cfg: &RunConfig) -> Result<Vec<PreparedScene>> {
    let kernel = KernelConfig::new(cfg.model.kernel_bandwidth)?;
    ds.split_scenes(split)
        .into_iter()
        .map(|s| Ok(PreparedScene::new(s, &kernel)?))
        .collect()
}

/// Fused predictions for one scene.
#[derive(Debug, Clone)]
pub struct ScenePrediction {
    /// Region-major `regions x classes` probabilities of the fused output.
    pub probs: Vec<f64>,
    /// Fusion weight per prediction source (outer) per region (inner).
    pub fusion: Vec<Vec<f64>>,
}

fn predict_one(
    model: &Model,
    params: &ParamSet,
    scene: &PreparedScene,
    precision: Precision,
) -> std::result::Result<ScenePrediction, TensorError> {
    let tape = Tape::new(precision);
    let b = Binder::new(&tape, params);
    let rollout = model.forward(&b, scene)?;
    Ok(ScenePrediction {
        probs: rollout.fused_probs(),
        fusion: rollout.fusion_weights()?,
    })
}

/// Forward every scene, fanning contiguous chunks out over at most
/// `threads` workers. Output order always matches input order.
pub fn predict_scenes(
    model: &Model,
    params: &ParamSet,
    scenes: &[PreparedScene],
    precision: Precision,
    threads: usize,
) -> std::result::Result<Vec<ScenePrediction>, TensorError> {
    if scenes.is_empty() {
        return Ok(Vec::new());
    }
    let threads = threads.clamp(1, scenes.len());
    if threads == 1 {
        return scenes
            .iter()
            .map(|s| predict_one(model, params, s, precision))
            .collect();
    }
    let chunk = scenes.len().div_ceil(threads);
    let chunk_results: Vec<std::result::Result<Vec<ScenePrediction>, TensorError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = scenes
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| predict_one(model, params, s, precision))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("prediction worker panicked"))
                .collect()
        });
    let mut out = Vec::with_capacity(scenes.len());
    for r in chunk_results {
        out.extend(r?);
    }
    Ok(out)
}

/// Pooled evaluation of one split (optionally restricted by keep masks).
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub metrics: Metrics,
    /// Mean fusion weight per prediction source over evaluated regions.
    pub fusion: Vec<(String, f64)>,
    /// Scenes that contributed at least one evaluated region.
    pub scenes: usize,
    /// Fraction of ground-truth regions kept by the drop protocol.
    pub recall: Option<f64>,
}

/// Pool per-scene predictions into ranked-retrieval metrics. With
/// `masks`, only regions whose mask entry is true are evaluated (the
/// masks must match the prediction layout region-for-region).
pub fn pool_predictions(
    preds: &[ScenePrediction],
    scenes: &[PreparedScene],
    masks: Option<&[Vec<bool>]>,
    classes: usize,
) -> EvalSummary {
    assert_eq!(preds.len(), scenes.len(), "one prediction per scene");
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut fusion_sums: Vec<(String, f64)> = Vec::new();
    let mut fusion_regions = 0usize;
    let mut used_scenes = 0usize;
    for (i, (pred, scene)) in preds.iter().zip(scenes).enumerate() {
        let keep = masks.map(|m| m[i].as_slice());
        if let Some(k) = keep {
            assert_eq!(k.len(), scene.regions(), "mask/scene region mismatch");
        }
        let mut any = false;
        for r in 0..scene.regions() {
            if keep.is_some_and(|k| !k[r]) {
                continue;
            }
            any = true;
            probs.extend_from_slice(&pred.probs[r * classes..(r + 1) * classes]);
            labels.push(scene.labels[r]);
            if fusion_sums.is_empty() && !pred.fusion.is_empty() {
                // Source names are positional; recover them lazily below.
                fusion_sums = vec![(String::new(), 0.0); pred.fusion.len()];
            }
            for (sum, row) in fusion_sums.iter_mut().zip(&pred.fusion) {
                sum.1 += row[r];
            }
            fusion_regions += 1;
        }
        if any {
            used_scenes += 1;
        }
    }
    let fusion = fusion_sums
        .into_iter()
        .map(|(name, sum)| (name, sum / fusion_regions.max(1) as f64))
        .collect();
    EvalSummary {
        metrics: evaluate(&probs, &labels, classes),
        fusion,
        scenes: used_scenes,
        recall: None,
    }
}

fn name_fusion(summary: &mut EvalSummary, model: &Model) {
    let names = crate::train::source_names(model);
    for (slot, name) in summary.fusion.iter_mut().zip(names) {
        slot.0 = name;
    }
}

fn recall_of(masks: &[Vec<bool>]) -> f64 {
    let total: usize = masks.iter().map(|m| m.len()).sum();
    let kept: usize = masks.iter().map(|m| m.iter().filter(|&&k| k).count()).sum();
    if total == 0 {
        return 1.0;
    }
    kept as f64 / total as f64
}

/// Everything needed to evaluate one split under any drop setting:
/// ground-truth scenes, their prepared forms, and (lazily) the fused
/// predictions on the unmodified scenes.
pub struct SplitEvaluator<'a> {
    model: &'a Model,
    params: &'a ParamSet,
    raw: Vec<&'a Scene>,
    prepared: Vec<PreparedScene>,
    full_preds: Vec<ScenePrediction>,
    kernel: KernelConfig,
    precision: Precision,
    threads: usize,
}

impl<'a> SplitEvaluator<'a> {
    pub fn new(
        model: &'a Model,
        params: &'a ParamSet,
        ds: &'a Dataset,
        split: Split,
        cfg: &RunConfig,
        threads: usize,
    ) -> Result<SplitEvaluator<'a>> {
        let raw = ds.split_scenes(split);
        if raw.is_empty() {
            bail!("split '{}' has no scenes", split.name());
        }
        let kernel = KernelConfig::new(cfg.model.kernel_bandwidth)?;
        let prepared = raw
            .iter()
            .map(|s| Ok(PreparedScene::new(s, &kernel)?))
            .collect::<Result<Vec<_>>>()?;
        let precision = cfg.train.precision;
        let full_preds = predict_scenes(model, params, &prepared, precision, threads)?;
        Ok(SplitEvaluator {
            model,
            params,
            raw,
            prepared,
            full_preds,
            kernel,
            precision,
            threads,
        })
    }

    /// Plain evaluation: every ground-truth region.
    pub fn no_drop(&self) -> EvalSummary {
        let mut s = pool_predictions(
            &self.full_preds,
            &self.prepared,
            None,
            self.model.cfg.classes,
        );
        name_fusion(&mut s, self.model);
        s
    }

    /// Keep masks for one threshold, from proposals drawn with `seed`
    /// (independent of the threshold, so masks are monotone in it).
    pub fn masks(&self, proposals: usize, jitter: f64, seed: u64, delta: f64) -> Vec<Vec<bool>> {
        self.raw
            .iter()
            .map(|s| {
                let props = region_proposals(s, proposals, jitter, seed);
                keep_mask(s, &props, delta)
            })
            .collect()
    }

    /// Evaluate under the drop protocol with precomputed keep masks.
    pub fn with_drop(&self, mode: DropMode, masks: &[Vec<bool>]) -> Result<EvalSummary> {
        let mut summary = match mode {
            DropMode::Post => pool_predictions(
                &self.full_preds,
                &self.prepared,
                Some(masks),
                self.model.cfg.classes,
            ),
            DropMode::Pre => {
                // Rebuild each scene from its surviving regions so the
                // model reasons without the dropped ones; scenes losing
                // every region are skipped but still count against recall.
                let mut kept_scenes = Vec::new();
                for (scene, mask) in self.raw.iter().zip(masks) {
                    let mut boxes = Vec::new();
                    let mut labels = Vec::new();
                    for (r, region) in scene.regions.iter().enumerate() {
                        if mask[r] {
                            boxes.push(region.bx);
                            labels.push(region.label);
                        }
                    }
                    if boxes.is_empty() {
                        continue;
                    }
                    kept_scenes.push(PreparedScene::with_boxes(
                        scene,
                        &boxes,
                        labels,
                        &self.kernel,
                    )?);
                }
                let preds = predict_scenes(
                    self.model,
                    self.params,
                    &kept_scenes,
                    self.precision,
                    self.threads,
                )?;
                pool_predictions(&preds, &kept_scenes, None, self.model.cfg.classes)
            }
        };
        name_fusion(&mut summary, self.model);
        summary.recall = Some(recall_of(masks));
        Ok(summary)
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// Run the finite-difference suite once; returns whether everything
/// passed. Prints one status line per checked operation.
pub fn run_gradcheck(args: &CommonArgs) -> Result<bool> {
    let cfg = args.load_config()?;
    let entries = gradient_suite(cfg.train.seed, cfg.gradcheck_corrupt)?;
    let mut all_ok = true;
    for e in &entries {
        println!("{}", e.line());
        all_ok &= e.passed();
    }
    println!(
        "gradcheck: {}/{} operations ok (seed {})",
        entries.iter().filter(|e| e.passed()).count(),
        entries.len(),
        cfg.train.seed
    );
    Ok(all_ok)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// Generate the synthetic dataset for this config and export it (scenes,
/// split manifest, class vocabulary, knowledge graph, resolved config).
pub fn run_gen_data(args: &CommonArgs) -> Result<()> {
    let cfg = args.load_config()?;
    let out = args.need_out("gen-data")?;
    let ds = Dataset::generate(&cfg.spec)?;
    ds.save(out)?;
    write_config(&cfg, out)?;
    let count = |s: Split| ds.split_scenes(s).len();
    println!(
        "wrote {} scenes ({} train / {} val / {} test) to {}",
        ds.scenes.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub digest: String,
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

/// Train from the config (or resume from `--checkpoint`), writing the
/// training log, the resolved config, a checkpoint at the learning-rate
/// decay step, and the final checkpoint into `--out`.
pub fn run_train(args: &CommonArgs) -> Result<TrainOutcome> {
    let cfg = args.load_config()?;
    let out = args.need_out("train")?;
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let digest = cfg.digest();

    let ds = Dataset::generate(&cfg.spec)?;
    let scenes = prepare_split(&ds, Split::Train, &cfg)?;
    if scenes.is_empty() {
        bail!("training split is empty; check data.scenes and the split fractions");
    }
    let (model, mut params) = build_model(&cfg)?;
    let mut opt = Sgd::new(cfg.train.optimizer.clone(), &params);

    let mut start = 0usize;
    if let Some(ckpt_path) = args.checkpoint.as_deref() {
        let ckpt = Checkpoint::load(ckpt_path)?;
        ckpt.restore(&mut params, &mut opt, Some(&digest))?;
        start = ckpt.step;
        println!("resumed from {} at step {start}", ckpt_path.display());
    }
    if start > cfg.train.steps {
        bail!(
            "checkpoint is at step {start}, beyond train.steps = {}",
            cfg.train.steps
        );
    }

    let mut rows: Vec<TrainRow> = Vec::new();
    let mut completed = start;
    if let Some(decay) = cfg.train.optimizer.lr_decay_step {
        if completed < decay && decay < cfg.train.steps {
            let mut phase = cfg.train.clone();
            phase.steps = decay;
            let report = train(&model, &mut params, &mut opt, &scenes, &phase, completed)?;
            rows.extend(report.rows);
            completed = decay;
            let ckpt = Checkpoint::capture(&params, &opt, completed, &digest);
            let path = out.join("checkpoint_decay.json");
            ckpt.save(&path)?;
            println!("decay checkpoint at step {completed}: {}", path.display());
        }
    }
    let report = train(&model, &mut params, &mut opt, &scenes, &cfg.train, completed)?;
    rows.extend(report.rows);

    let ckpt = Checkpoint::capture(&params, &opt, cfg.train.steps, &digest);
    let ckpt_path = out.join("checkpoint.json");
    ckpt.save(&ckpt_path)?;
    write_config(&cfg, out)?;
    write_train_log(&rows, &digest, &out.join("train_log.tsv"))?;

    for row in &rows {
        println!("step {:>6}  lr {:<8}  loss {:.4}", row.step, row.lr, row.total);
    }
    let final_loss = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained to step {} (final loss {:.4}); checkpoint {}",
        cfg.train.steps,
        final_loss,
        ckpt_path.display()
    );
    Ok(TrainOutcome {
        digest,
        steps: cfg.train.steps,
        final_loss,
        checkpoint: ckpt_path,
    })
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = format!("# config {}\n{}", cfg.digest(), cfg.canonical());
    fs::write(out.join("config.txt"), text)?;
    Ok(())
}

fn write_train_log(rows: &[TrainRow], digest: &str, path: &Path) -> Result<()> {
    let mut text = format!("# config {digest}\n");
    if let Some(first) = rows.first() {
        let mut header = String::from("step\tscene\tlr\ttotal");
        for (name, _) in &first.terms {
            let _ = write!(header, "\tloss:{name}");
        }
        for (name, _) in &first.fusion {
            let _ = write!(header, "\tatt:{name}");
        }
        text.push_str(&header);
        text.push('\n');
        for row in rows {
            let _ = write!(text, "{}\t{}\t{}\t{}", row.step, row.scene, row.lr, row.total);
            for (_, v) in &row.terms {
                let _ = write!(text, "\t{v}");
            }
            for (_, v) in &row.fusion {
                let _ = write!(text, "\t{v}");
            }
            text.push('\n');
        }
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Restore the checkpoint (refusing a config-digest mismatch) and score
/// the configured split, honoring `eval.drop_mode`/`eval.drop_delta`.
/// Prints machine-readable `name<TAB>value` lines and writes them to
/// `--out/metrics.tsv` when `--out` is given.
pub fn run_eval(args: &CommonArgs) -> Result<EvalSummary> {
    let cfg = args.load_config()?;
    let digest = cfg.digest();
    let (model, mut params) = build_model(&cfg)?;
    let mut opt = Sgd::new(cfg.train.optimizer.clone(), &params);
    let ckpt = Checkpoint::load(args.need_checkpoint("eval")?)?;
    ckpt.restore(&mut params, &mut opt, Some(&digest))?;

    let ds = Dataset::generate(&cfg.spec)?;
    let threads = thread_limit()?;
    let ev = SplitEvaluator::new(&model, &params, &ds, cfg.eval_split, &cfg, threads)?;
    let summary = match cfg.eval_drop {
        None => ev.no_drop(),
        Some((mode, delta)) => {
            let masks = ev.masks(cfg.sweep.proposals, cfg.sweep.jitter, cfg.spec.seed, delta);
            ev.with_drop(mode, &masks)?
        }
    };

    let lines = metric_lines(&cfg, &summary);
    print!("{lines}");
    if let Some(out) = args.out.as_deref() {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.tsv"), format!("# config {digest}\n{lines}"))?;
    }
    Ok(summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "nan".into(),
    }
}

fn metric_lines(cfg: &RunConfig, s: &EvalSummary) -> String {
    let mut text = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(text, "{k}\t{v}");
    };
    line("split", cfg.eval_split.name().to_string());
    line("scenes", s.scenes.to_string());
    line("regions", s.metrics.regions.to_string());
    if let Some((mode, delta)) = cfg.eval_drop {
        line("drop_mode", mode.name().to_string());
        line("drop_delta", delta.to_string());
    }
    if let Some(r) = s.recall {
        line("recall", r.to_string());
    }
    for (name, v) in s.metrics.rows() {
        line(name, fmt_opt(v));
    }
    for (name, v) in &s.fusion {
        line(&format!("fusion.{name}"), v.to_string());
    }
    text
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub delta: f64,
    pub mode: DropMode,
    pub recall: f64,
    pub metrics: Metrics,
}

pub const SWEEP_HEADER: &str =
    "delta,mode,recall,per_instance_ap,per_instance_ac,per_class_ap,per_class_ac";

/// Evaluate the checkpoint under the drop protocol at every configured
/// threshold, in both pre and post modes, writing `--out/sweep.csv`.
pub fn run_sweep(args: &CommonArgs) -> Result<Vec<SweepRow>> {
    let cfg = args.load_config()?;
    let digest = cfg.digest();
    let out = args.need_out("sweep")?;
    let (model, mut params) = build_model(&cfg)?;
    let mut opt = Sgd::new(cfg.train.optimizer.clone(), &params);
    let ckpt = Checkpoint::load(args.need_checkpoint("sweep")?)?;
    ckpt.restore(&mut params, &mut opt, Some(&digest))?;

    let ds = Dataset::generate(&cfg.spec)?;
    let threads = thread_limit()?;
    let ev = SplitEvaluator::new(&model, &params, &ds, cfg.eval_split, &cfg, threads)?;

    let mut rows = Vec::new();
    for &delta in &cfg.sweep.deltas {
        let masks = ev.masks(cfg.sweep.proposals, cfg.sweep.jitter, cfg.spec.seed, delta);
        for mode in [DropMode::Pre, DropMode::Post] {
            let summary = ev.with_drop(mode, &masks)?;
            rows.push(SweepRow {
                delta,
                mode,
                recall: summary.recall.expect("drop evaluation sets recall"),
                metrics: summary.metrics,
            });
        }
    }

    let csv = sweep_csv(&rows, &digest);
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(rows)
}

fn sweep_csv(rows: &[SweepRow], digest: &str) -> String {
    let mut csv = format!("# config {digest}\n{SWEEP_HEADER}\n");
    for row in rows {
        let m = &row.metrics;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.delta,
            row.mode.name(),
            row.recall,
            fmt_opt(m.per_instance_ap),
            m.per_instance_ac,
            fmt_opt(m.per_class_ap),
            fmt_opt(m.per_class_ac),
        );
    }
    csv
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Summarize the artifacts in `--out` as a flat key-value block. Refuses
/// to mix artifacts whose embedded config digests disagree.
pub fn run_report(args: &CommonArgs) -> Result<String> {
    let out = args.need_out("report")?;
    let config_path = out.join("config.txt");
    if !config_path.exists() {
        bail!("no config.txt in {}; run train or gen-data first", out.display());
    }
    let cfg = RunConfig::load(Some(&config_path), None)?;
    let digest = cfg.digest();

    let mut text = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(text, "{k} = {v}");
    };
    line("out", out.display().to_string());
    line("digest", digest.clone());
    line("variant", cfg.model.variant.name().to_string());
    line("iterations", cfg.model.iterations.to_string());
    line("train.steps", cfg.train.steps.to_string());
    line("seed", cfg.train.seed.to_string());

    let log_path = out.join("train_log.tsv");
    if log_path.exists() {
        let content = read_artifact(&log_path, &digest)?;
        if let Some(last) = content.lines().filter(|l| !l.is_empty()).last() {
            let cols: Vec<&str> = last.split('\t').collect();
            if cols.len() >= 4 && cols[0] != "step" {
                line("train.last_step", cols[0].to_string());
                line("train.final_loss", cols[3].to_string());
            }
        }
    } else {
        line("train.log", "missing".into());
    }

    let metrics_path = out.join("metrics.tsv");
    if metrics_path.exists() {
        let content = read_artifact(&metrics_path, &digest)?;
        for l in content.lines() {
            if let Some((k, v)) = l.split_once('\t') {
                line(&format!("eval.{k}"), v.to_string());
            }
        }
    } else {
        line("eval.metrics", "missing".into());
    }

    let sweep_path = out.join("sweep.csv");
    if sweep_path.exists() {
        let content = read_artifact(&sweep_path, &digest)?;
        let mut lines_iter = content.lines().filter(|l| !l.is_empty());
        let header = lines_iter.next().unwrap_or_default();
        let names: Vec<&str> = header.split(',').collect();
        for row in lines_iter {
            let cols: Vec<&str> = row.split(',').collect();
            if cols.len() != names.len() {
                continue;
            }
            for (name, v) in names.iter().zip(&cols).skip(2) {
                line(
                    &format!("sweep.delta_{}.{}.{name}", cols[0], cols[1]),
                    v.to_string(),
                );
            }
        }
    } else {
        line("sweep.csv", "missing".into());
    }
    Ok(text)
}

/// Read an artifact and verify its `# config` line matches `digest`.
/// Returns the content with comment lines stripped.
fn read_artifact(path: &Path, digest: &str) -> Result<String> {
    let raw = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut body = String::new();
    for l in raw.lines() {
        if let Some(rest) = l.strip_prefix("# config ") {
            if rest.trim() != digest {
                bail!(
                    "{} was produced under config digest {}, not {} — refusing to mix artifacts",
                    path.display(),
                    rest.trim(),
                    digest
                );
            }
            continue;
        }
        if l.starts_with('#') {
            continue;
        }
        body.push_str(l);
        body.push('\n');
    }
    Ok(body)
}
