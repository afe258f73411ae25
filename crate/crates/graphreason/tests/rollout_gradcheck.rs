//! Finite-difference verification of complete forward/backward passes
//! through the public API: whole-model rollouts and the graph module in
//! isolation.
//!
//! Quantities the training loss deliberately treats as constants (region
//! re-weighting, the region/class assignment built from previous
//! predictions) are frozen at the base point so the numeric derivative
//! matches the intended stop-gradient semantics.

use graphreason::geometry::{KernelConfig, PixelBox, SpatialEdge};
use graphreason::global::GlobalModule;
use graphreason::kg::ClassVocabulary;
use graphreason::model::{Model, ModelConfig, PreparedKg, PreparedScene, Variant};
use graphreason::scenes::{class_names, default_knowledge_graph, Region, Scene};
use graphreason::tensor::gradcheck::{finite_diff_check, DEFAULT_EPS, DEFAULT_TOL};
use graphreason::tensor::params::{Binder, ParamId, ParamSet};
use graphreason::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Four regions realizing all five spatial relations (left/right,
/// above/below, one overlapping pair) on an 8x8 grid with 4 channels.
fn scene_with_all_relations(classes: usize) -> Scene {
    let mk = |x1: f64, y1: f64, x2: f64, y2: f64, label: usize| Region {
        bx: PixelBox::new(x1, y1, x2, y2).unwrap(),
        label,
    };
    let features: Vec<f64> = (0..8 * 8 * 4)
        .map(|i| ((i * 29) % 23) as f64 / 23.0 - 0.4)
        .collect();
    Scene {
        id: "relations".into(),
        grid: (8, 8),
        channels: 4,
        size: (8.0, 8.0),
        features,
        regions: vec![
            mk(1.0, 1.0, 4.0, 4.0, 0),
            mk(5.0, 1.0, 8.0, 4.0, 1 % classes),
            mk(1.0, 5.0, 4.0, 8.0, 2 % classes),
            mk(2.0, 2.0, 5.0, 5.0, 3 % classes),
        ],
    }
}

fn tiny_cfg(variant: Variant, classes: usize) -> ModelConfig {
    ModelConfig {
        classes,
        feat_channels: 4,
        grid: (8, 8),
        mem_channels: 5,
        conv_channels: 4,
        fc_width: 8,
        crop: 3,
        iterations: 2,
        graph_dim: 5,
        graph_stacks: 2,
        variant,
        ..ModelConfig::default()
    }
}

fn pick(params: &ParamSet, names: &[&str]) -> Vec<ParamId> {
    names
        .iter()
        .map(|n| {
            params
                .find(n)
                .unwrap_or_else(|| panic!("no parameter named {n}"))
        })
        .collect()
}

/// Region weights captured once at the base point, so nudged evaluations
/// keep the stop-gradient semantics of the real loss.
fn frozen_weights(model: &Model, scene: &PreparedScene, params: &ParamSet) -> Vec<Vec<f64>> {
    let tape = Tape::default();
    let b = Binder::new(&tape, params);
    let rollout = model.forward(&b, scene).unwrap();
    model.region_weights(&rollout, &scene.labels)
}

#[test]
fn local_chain_gradients_match_finite_differences() {
    let cfg = tiny_cfg(Variant::LocalOnly, 8);
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let model = Model::new(cfg, None, &mut params, &mut rng).unwrap();
    let kernel = KernelConfig::new(2.0).unwrap();
    let scene = PreparedScene::new(&scene_with_all_relations(8), &kernel).unwrap();
    let frozen = frozen_weights(&model, &scene, &params);

    let ids = pick(
        &params,
        &[
            "plain.fc.w",
            "plain.head_cls.b",
            "plain.head_att.w",
            "local.fuse1.w",
            "local.fuse2.b",
            "local.gate_u.w",
            "local.gate_z.w",
            "local.cand_f.w",
            "local.cand_s.w",
            "local.cand.b",
            "local.ctx1.w",
            "local.ctx3.b",
            "local.fc1.w",
            "local.fc2.b",
            "local.head_cls.w",
            "local.head_att.w",
        ],
    );
    let report = finite_diff_check(
        &mut params,
        &ids,
        DEFAULT_EPS,
        DEFAULT_TOL,
        None,
        |tape, ps| {
            let b = Binder::new(tape, ps);
            let rollout = model.forward(&b, &scene)?;
            Ok(model.loss_with_weights(&rollout, &scene.labels, &frozen)?.total)
        },
    )
    .unwrap();
    assert!(
        report.passed(),
        "local chain: {} of {} coords off, max rel err {:.3e}, first: {:?}",
        report.failures.len(),
        report.coords_checked,
        report.max_rel_err,
        report.failures.first()
    );
}

#[test]
fn full_variant_gradients_with_crossfeed_and_spatial_graph() {
    // The semantic path is switched off so the only stop-gradient inputs
    // are the frozen loss weights; everything else must match numerically.
    let mut cfg = tiny_cfg(Variant::Full, 4);
    cfg.ablations.no_semantic_path = true;
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let model = Model::new(cfg, None, &mut params, &mut rng).unwrap();
    let kernel = KernelConfig::new(2.0).unwrap();
    let scene = PreparedScene::new(&scene_with_all_relations(4), &kernel).unwrap();
    let frozen = frozen_weights(&model, &scene, &params);

    let ids = pick(
        &params,
        &[
            "plain.fc.b",
            "cross.local_in.w",
            "cross.global_in.w",
            "local.cand_s.w",
            "local.ctx2.w",
            "global.enc1.w",
            "global.enc2.b",
            "global.gate_u.w",
            "global.gate_z.w",
            "global.cand_x.w",
            "global.cand_m.w",
            "global.cand.b",
            "global.s0.spatial.left-of.w",
            "global.s0.spatial.below.w",
            "global.s1.spatial.iou.w",
            "global.head_cls.w",
            "global.head_att.w",
        ],
    );
    let report = finite_diff_check(
        &mut params,
        &ids,
        DEFAULT_EPS,
        DEFAULT_TOL,
        None,
        |tape, ps| {
            let b = Binder::new(tape, ps);
            let rollout = model.forward(&b, &scene)?;
            Ok(model.loss_with_weights(&rollout, &scene.labels, &frozen)?.total)
        },
    )
    .unwrap();
    assert!(
        report.passed(),
        "full rollout: {} of {} coords off, max rel err {:.3e}, first: {:?}",
        report.failures.len(),
        report.coords_checked,
        report.max_rel_err,
        report.failures.first()
    );
}

#[test]
fn graph_module_gradients_including_semantic_path() {
    // Exercise the graph module directly so the region/class assignment
    // can be held constant while the semantic path weights get checked.
    let classes = 8;
    let regions = 3;
    let cfg = tiny_cfg(Variant::GlobalOnly, classes);
    let vocab = ClassVocabulary::new(class_names(classes)).unwrap();
    let kg = PreparedKg::new(&default_knowledge_graph(&vocab)).unwrap();
    assert!(kg.type_names.len() >= 3, "want several edge types");

    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let module = GlobalModule::new(&cfg, &kg.type_names, &mut params, &mut rng).unwrap();
    let dh = cfg.feat_channels;
    let dg = cfg.graph_dim;
    let in_pooled = params
        .add_normal("in.pooled", &[regions, dh], 1.0, &mut rng)
        .unwrap();
    let in_v = params
        .add_normal("in.v", &[regions, classes], 1.0, &mut rng)
        .unwrap();
    let in_mem = params
        .add_normal("in.mem", &[regions, dg], 0.5, &mut rng)
        .unwrap();

    // Dense asymmetric adjacency per relation; values irrelevant, nonzero
    // everywhere so each per-type weight matters.
    let adjacency: Vec<Vec<f64>> = (0..SpatialEdge::ALL.len())
        .map(|e| {
            (0..regions * regions)
                .map(|i| {
                    if i % (regions + 1) == 0 {
                        0.0
                    } else {
                        0.1 + ((e * 7 + i * 3) % 5) as f64 / 10.0
                    }
                })
                .collect()
        })
        .collect();
    let prev_probs: Vec<f64> = {
        let mut p = Vec::with_capacity(regions * classes);
        for r in 0..regions {
            let row: Vec<f64> = (0..classes).map(|c| 1.0 + ((r + c) % 3) as f64).collect();
            let s: f64 = row.iter().sum();
            p.extend(row.into_iter().map(|x| x / s));
        }
        p
    };
    let labels = vec![0, 5, 3];
    let nll_weights = vec![0.5, 0.3, 0.2];
    let att_probe = vec![0.7, -0.4, 0.9];

    let mut ids: Vec<ParamId> = pick(
        &params,
        &[
            "global.enc1.w",
            "global.enc1.b",
            "global.enc2.w",
            "global.gate_u.w",
            "global.gate_z.b",
            "global.cand_x.w",
            "global.cand_m.w",
            "global.class_emb",
            "global.s0.spatial.above.w",
            "global.s1.spatial.right-of.w",
            "global.s0.sem_in.w",
            "global.s0.sem_emb.w",
            "global.s0.sem_back.w",
            "global.s1.sem_back.w",
            "global.head_cls.w",
            "global.head_att.w",
        ],
    );
    for name in &kg.type_names {
        ids.push(params.find(&format!("global.s0.kg.{name}.w")).unwrap());
    }
    ids.extend([in_pooled, in_v, in_mem]);

    let report = finite_diff_check(
        &mut params,
        &ids,
        DEFAULT_EPS,
        DEFAULT_TOL,
        None,
        |tape, ps| {
            let b = Binder::new(tape, ps);
            let spatial: Vec<Tensor> = adjacency
                .iter()
                .map(|m| tape.constant(&[regions, regions], m.clone()))
                .collect::<graphreason::tensor::Result<_>>()?;
            let kg_mats: Vec<Tensor> = kg
                .mats
                .iter()
                .map(|m| tape.constant(&[classes, classes], m.clone()))
                .collect::<graphreason::tensor::Result<_>>()?;
            let (_, logits, att) = module.iterate(
                &b,
                &b.get(in_pooled),
                &b.get(in_v),
                &b.get(in_mem),
                &spatial,
                &kg_mats,
                &prev_probs,
            )?;
            let probe = tape.constant(&[regions], att_probe.clone())?;
            logits
                .weighted_nll(&labels, &nll_weights)?
                .add(&att.mul(&probe)?.sum())
        },
    )
    .unwrap();
    assert!(
        report.passed(),
        "graph module: {} of {} coords off, max rel err {:.3e}, first: {:?}",
        report.failures.len(),
        report.coords_checked,
        report.max_rel_err,
        report.failures.first()
    );
}
