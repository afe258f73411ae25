//! Follow the graph module through its refinement iterations. A scene's
//! regions form a graph with spatial relations (left-of, above, overlap,
//! ...) and class-level knowledge edges (part-of, similar-to); each
//! iteration propagates evidence along both and revises the predictions.
//! The demo trains a small graph-only model, then replays one ambiguous
//! test region and prints how its prediction firms up round by round.
//!
//! ```text
//! cargo run --example graph_reasoning
//! ```

use std::fs;

use graphreason::checkpoint::Checkpoint;
use graphreason::commands::{build_model, run_train, CommonArgs, SplitEvaluator};
use graphreason::config::RunConfig;
use graphreason::geometry::SpatialEdge;
use graphreason::metrics::argmax_row;
use graphreason::model::{PreparedScene, Source};
use graphreason::scenes::{Dataset, Split};
use graphreason::tensor::kernels::softmax_row;
use graphreason::tensor::optim::Sgd;
use graphreason::tensor::params::Binder;
use graphreason::tensor::Tape;

const CONFIG: &str = "\
data.scenes = 240
data.val_frac = 0
data.test_frac = 0.2
data.seed = 0
train.seed = 0
model.variant = global
train.steps = 500
train.lr_decay_step = 300
train.lr_decay_factor = 0.2
train.log_every = 250
";

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("graphreason_graph_example");
    fs::create_dir_all(&dir)?;
    let cfg_path = dir.join("run.cfg");
    fs::write(&cfg_path, CONFIG)?;

    println!("training a graph-only model (500 steps, ~200 scenes)...");
    let args = CommonArgs {
        config: Some(cfg_path.clone()),
        seed: None,
        checkpoint: None,
        out: Some(dir.clone()),
    };
    let outcome = run_train(&args)?;
    println!("final training loss {:.4}\n", outcome.final_loss);

    // Rebuild the model and load the trained weights back in.
    let cfg = RunConfig::load(Some(&cfg_path), None)?;
    let (model, mut params) = build_model(&cfg)?;
    let mut opt = Sgd::new(cfg.train.optimizer.clone(), &params);
    Checkpoint::load(&outcome.checkpoint)?.restore(&mut params, &mut opt, Some(&cfg.digest()))?;
    let ds = Dataset::generate(&cfg.spec)?;

    let ev = SplitEvaluator::new(&model, &params, &ds, Split::Test, &cfg, 2)?;
    let summary = ev.no_drop();
    println!(
        "test split: per-class accuracy {:.3}, per-class AP {:.3} over {} scenes",
        summary.metrics.per_class_ac.unwrap(),
        summary.metrics.per_class_ap.unwrap(),
        summary.scenes
    );
    println!("mean fusion weight per prediction source:");
    for (name, w) in &summary.fusion {
        println!("  {name:<8} {w:.3}");
    }

    // Find a test region where the context-blind plain head is wrong but
    // the fused, graph-refined prediction is right.
    let kernel = graphreason::geometry::KernelConfig::new(cfg.model.kernel_bandwidth)?;
    let names = ds.classes.names();
    let mut shown = false;
    for scene in ds.split_scenes(Split::Test) {
        let prepared = PreparedScene::new(scene, &kernel)?;
        let tape = Tape::new(cfg.train.precision);
        let b = Binder::new(&tape, &params);
        let rollout = model.forward(&b, &prepared)?;
        let classes = cfg.model.classes;
        let fused = rollout.fused.value();

        let plain = rollout
            .records
            .iter()
            .find(|r| r.source == Source::Plain)
            .expect("plain record");
        let plain_logits = plain.logits.value();

        for (r, &label) in prepared.labels.iter().enumerate() {
            let plain_pred = argmax_row(&plain_logits[r * classes..(r + 1) * classes]);
            let fused_pred = argmax_row(&fused[r * classes..(r + 1) * classes]);
            if plain_pred == label || fused_pred != label {
                continue;
            }

            println!("\n--- scene '{}', region {r} (true class: {}) ---", scene.id, names[label]);
            println!("neighbors in the region graph (strongest spatial edges):");
            let rn = prepared.labels.len();
            for (e, edge) in SpatialEdge::ALL.iter().enumerate() {
                let row = &prepared.adjacency[e][r * rn..(r + 1) * rn];
                if let Some((j, w)) = row
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w > 1e-6)
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                {
                    println!("  {:<9} {:<9} weight {w:.3}", edge.name(), names[prepared.labels[j]]);
                }
            }

            println!("\nprediction after each round:");
            for rec in &rollout.records {
                let probs = softmax_row(&rec.logits.value()[r * classes..(r + 1) * classes]);
                let pred = argmax_row(&probs);
                println!(
                    "  {:<8} -> {:<9} p(pred) {:.3}   p(true) {:.3}",
                    rec.source.name(),
                    names[pred],
                    probs[pred],
                    probs[label]
                );
            }
            let probs = softmax_row(&fused[r * classes..(r + 1) * classes]);
            println!(
                "  {:<8} -> {:<9} p(pred) {:.3}   p(true) {:.3}",
                "fused",
                names[argmax_row(&probs)],
                probs[argmax_row(&probs)],
                probs[label]
            );

            let weights = rollout.fusion_weights()?;
            let per_source: Vec<String> = rollout
                .records
                .iter()
                .zip(&weights)
                .map(|(rec, row)| format!("{} {:.3}", rec.source.name(), row[r]))
                .collect();
            println!("\nfusion weights for this region: {}", per_source.join(", "));
            println!("\nthe plain head sees only the region crop, which is identical for");
            println!("both pair classes; the graph rounds pull in the anchor / parent");
            println!("evidence and the fusion leans on the later, sharper rounds.");
            shown = true;
            break;
        }
        if shown {
            break;
        }
    }
    if !shown {
        println!("\n(no test region had a plain-head miss that fusion fixed; rerun with another seed)");
    }
    Ok(())
}
