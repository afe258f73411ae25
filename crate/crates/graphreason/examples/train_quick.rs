//! The headline experiment in miniature: train all four model variants on
//! the same synthetic benchmark and compare test metrics. The benchmark
//! plants two class pairs whose members look identical in isolation, so a
//! context-blind classifier tops out at 75% per-class accuracy (4 clean
//! classes + 4 pair classes at a coin flip). The reasoning variants break
//! that ceiling by using spatial and semantic context.
//!
//! Takes roughly half a minute. For the full-scale numbers, run the
//! acceptance suite: `cargo test --test acceptance -- --nocapture`.
//!
//! ```text
//! cargo run --example train_quick
//! ```

use std::fs;
use std::time::Instant;

use graphreason::checkpoint::Checkpoint;
use graphreason::commands::{build_model, run_train, CommonArgs, EvalSummary, SplitEvaluator};
use graphreason::config::RunConfig;
use graphreason::scenes::{Dataset, Split};
use graphreason::tensor::optim::Sgd;

/// One training run: fit the variant, restore its checkpoint, score the
/// held-out test split.
fn run_variant(variant: &str, dir: &std::path::Path) -> anyhow::Result<(f64, EvalSummary)> {
    let cfg_text = format!(
        "data.scenes = 300\n\
         data.val_frac = 0\n\
         data.test_frac = 0.2\n\
         data.seed = 0\n\
         train.seed = 0\n\
         train.steps = 500\n\
         train.lr_decay_step = 300\n\
         train.lr_decay_factor = 0.2\n\
         train.log_every = 1000\n\
         model.variant = {variant}\n"
    );
    let out = dir.join(variant);
    fs::create_dir_all(&out)?;
    let cfg_path = out.join("run.cfg");
    fs::write(&cfg_path, cfg_text)?;

    let args = CommonArgs {
        config: Some(cfg_path.clone()),
        seed: None,
        checkpoint: None,
        out: Some(out),
    };
    let outcome = run_train(&args)?;

    let cfg = RunConfig::load(Some(&cfg_path), None)?;
    let (model, mut params) = build_model(&cfg)?;
    let mut opt = Sgd::new(cfg.train.optimizer.clone(), &params);
    Checkpoint::load(&outcome.checkpoint)?.restore(&mut params, &mut opt, Some(&cfg.digest()))?;
    let ds = Dataset::generate(&cfg.spec)?;
    let ev = SplitEvaluator::new(&model, &params, &ds, Split::Test, &cfg, 2)?;
    Ok((outcome.final_loss, ev.no_drop()))
}

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("graphreason_train_example");

    println!("benchmark: 300 scenes (240 train / 60 test), 8 classes, 500 steps per run");
    println!("variants:");
    println!("  baseline  per-region classifier, no cross-region context");
    println!("  local     + convolutional spatial memory");
    println!("  global    + region/class graph reasoning");
    println!("  full      both modules, cross-feeding each round\n");

    let mut rows = Vec::new();
    for variant in ["baseline", "local", "global", "full"] {
        let t0 = Instant::now();
        let (loss, summary) = run_variant(variant, &dir)?;
        println!(
            "trained {variant:<8}  final loss {loss:.4}  ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );
        rows.push((variant, summary));
    }

    println!("\ntest-split results:");
    println!(
        "  {:<9} {:>8} {:>8} {:>9} {:>9}",
        "variant", "inst-AC", "class-AC", "inst-AP", "class-AP"
    );
    for (variant, s) in &rows {
        println!(
            "  {:<9} {:>8.3} {:>8.3} {:>9.3} {:>9.3}",
            variant,
            s.metrics.per_instance_ac,
            s.metrics.per_class_ac.unwrap(),
            s.metrics.per_instance_ap.unwrap(),
            s.metrics.per_class_ap.unwrap()
        );
    }

    let base = rows[0].1.metrics.per_class_ac.unwrap();
    let full = rows[3].1.metrics.per_class_ac.unwrap();
    println!(
        "\nreasoning gap: full {:.3} vs baseline {:.3} per-class accuracy ({:+.1} points)",
        full,
        base,
        (full - base) * 100.0
    );
    println!("(the baseline hovers near its 0.75 ceiling: the planted class pairs");
    println!(" are indistinguishable without looking at the rest of the scene)");

    println!("\nhow the full model weighs its prediction rounds at fusion time:");
    for (name, w) in &rows[3].1.fusion {
        let bar = "#".repeat((w * 40.0).round() as usize);
        println!("  {name:<8} {w:.3} {bar}");
    }
    println!("(later rounds have seen more context and usually earn more weight)");
    Ok(())
}
