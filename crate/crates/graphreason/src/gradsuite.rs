//! Finite-difference verification suite behind the `gradcheck` command.
//!
//! One entry per differentiable tensor operation, plus two end-to-end
//! entries: the complete rollout loss (local + graph modules, cross-feed,
//! attention fusion) and a graph-reasoner step exercising the semantic
//! path. Quantities the real loss treats as constants — region
//! re-weighting and the region/class assignment built from previous
//! predictions — are frozen at the base point so numeric slopes match the
//! intended stop-gradient semantics.

use crate::geometry::{coverage_weights, KernelConfig, PixelBox, SpatialEdge};
use crate::global::GlobalModule;
use crate::kg::ClassVocabulary;
use crate::model::{Model, ModelConfig, PreparedKg, PreparedScene, Variant};
use crate::scenes::{class_names, default_knowledge_graph, sub_seed, Region, Scene};
use crate::tensor::gradcheck::{finite_diff_check, Corruption, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL};
use crate::tensor::params::{Binder, ParamId, ParamSet};
use crate::tensor::{Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Result of checking one operation (or one end-to-end loss).
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }

    /// One human-readable status line, the unit the `gradcheck` command
    /// prints per checked operation.
    pub fn line(&self) -> String {
        format!(
            "{:22} {:4} coords  max rel err {:9.3e}  {}",
            self.name,
            self.report.coords_checked,
            self.report.max_rel_err,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

const TAG_SUITE: u64 = 0x53554954; // "SUIT"

/// Step size for the end-to-end entries. The rollout feeds hundreds of
/// ReLU pre-activations, so the default step's kink-crossing window is
/// wide enough to trip occasionally; a tenth of it keeps crossings
/// negligible while staying far above 64-bit roundoff noise.
const ROLLOUT_EPS: f64 = 1e-6;

/// Run every check once for the given seed. With `corrupt` set, the
/// analytic adjoint of the first entry's first coordinate is doubled
/// before comparison, demonstrating that a wrong backward rule is caught.
pub fn gradient_suite(seed: u64, corrupt: bool) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    let mut slot = 0u64;
    let rng_for = |k: &mut u64| {
        let r = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_SUITE, *k));
        *k += 1;
        r
    };

    // -- elementwise and shape ops ------------------------------------
    {
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 6);
        entries.push(binary_op("add", corrupt, &mut rng, probe.clone(), |a, b| {
            a.add(b)
        })?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 6);
        entries.push(binary_op("sub", false, &mut rng, probe.clone(), |a, b| {
            a.sub(b)
        })?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 6);
        entries.push(binary_op("mul", false, &mut rng, probe, |a, b| a.mul(b))?);
    }
    {
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 6);
        entries.push(unary_op("affine", &mut rng, &[2, 3], probe, |x| {
            Ok(x.affine(1.7, -0.3))
        })?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 6);
        entries.push(unary_op("relu", &mut rng, &[2, 3], probe, |x| Ok(x.relu()))?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 6);
        entries.push(unary_op("sigmoid", &mut rng, &[2, 3], probe, |x| {
            Ok(x.sigmoid())
        })?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 6);
        entries.push(unary_op("tanh", &mut rng, &[2, 3], probe, |x| Ok(x.tanh()))?);
        let mut rng = rng_for(&mut slot);
        entries.push(unary_op("sum", &mut rng, &[2, 3], vec![1.0], |x| Ok(x.sum()))?);
        let mut rng = rng_for(&mut slot);
        entries.push(unary_op("mean", &mut rng, &[2, 3], vec![1.0], |x| {
            Ok(x.mean())
        })?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 4);
        entries.push(unary_op("mean_spatial", &mut rng, &[2, 3, 4], probe, |x| {
            x.mean_spatial()
        })?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 4);
        entries.push(unary_op("row", &mut rng, &[3, 4], probe, |x| x.row(1))?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 12);
        entries.push(unary_op("reshape", &mut rng, &[2, 6], probe, |x| {
            x.reshape(&[3, 4])
        })?);
        let mut rng = rng_for(&mut slot);
        let probe = vals(&mut rng, 2 * 3 * 5);
        entries.push(unary_op("broadcast_hw", &mut rng, &[5], probe, |x| {
            x.broadcast_hw(2, 3)
        })?);
    }

    // -- linear algebra -----------------------------------------------
    {
        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let a = ps.add("a", &[3, 4], vals(&mut rng, 12))?;
        let b = ps.add("b", &[4, 2], vals(&mut rng, 8))?;
        let probe = vals(&mut rng, 6);
        entries.push(check("matmul", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let out = bd.get(a).matmul(&bd.get(b))?;
            probed(tape, &out, &probe)
        })?);

        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[3, 4], vals(&mut rng, 12))?;
        let v = ps.add("v", &[4], vals(&mut rng, 4))?;
        let probe = vals(&mut rng, 12);
        entries.push(check("add_row_vec", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let out = bd.get(x).add_row_vec(&bd.get(v))?;
            probed(tape, &out, &probe)
        })?);
    }

    // -- concatenation and stacking -----------------------------------
    {
        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let a = ps.add("a", &[2, 3], vals(&mut rng, 6))?;
        let b = ps.add("b", &[2, 2], vals(&mut rng, 4))?;
        let probe = vals(&mut rng, 10);
        entries.push(check("concat_last", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let out = Tensor::concat_last(&[&bd.get(a), &bd.get(b)])?;
            probed(tape, &out, &probe)
        })?);

        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let a = ps.add("a", &[3], vals(&mut rng, 3))?;
        let b = ps.add("b", &[3], vals(&mut rng, 3))?;
        let probe = vals(&mut rng, 6);
        entries.push(check("stack_rows", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let out = Tensor::stack_rows(&[&bd.get(a), &bd.get(b)])?;
            probed(tape, &out, &probe)
        })?);
    }

    // -- convolution and region read/write ----------------------------
    {
        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let x = ps.add("x", &[3, 3, 2], vals(&mut rng, 18))?;
        let ker = ps.add("ker", &[3, 3, 2, 3], vals(&mut rng, 54))?;
        let bias = ps.add("bias", &[3], vals(&mut rng, 3))?;
        let probe = vals(&mut rng, 27);
        entries.push(check("conv2d", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let out = bd.get(x).conv2d(&bd.get(ker), Some(&bd.get(bias)))?;
            probed(tape, &out, &probe)
        })?);

        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let map = ps.add("map", &[4, 4, 2], vals(&mut rng, 32))?;
        let bx = PixelBox::new(0.3, 0.7, 3.2, 3.5).unwrap();
        let probe = vals(&mut rng, 8);
        entries.push(check("crop_resize", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let out = bd.get(map).crop_and_resize(&bx, 2, 2)?;
            probed(tape, &out, &probe)
        })?);

        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let mem = ps.add("mem", &[3, 3, 2], vals(&mut rng, 18))?;
        let p1 = ps.add("p1", &[2, 2, 2], vals(&mut rng, 8))?;
        let p2 = ps.add("p2", &[2, 2, 2], vals(&mut rng, 8))?;
        let b1 = PixelBox::new(0.2, 0.1, 1.8, 1.9).unwrap();
        let b2 = PixelBox::new(1.1, 1.3, 2.9, 2.8).unwrap();
        let cov = Arc::new(coverage_weights(&[b1, b2], (3, 3), (3.0, 3.0))?);
        let probe = vals(&mut rng, 18);
        entries.push(check("paste_back", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let out = bd
                .get(mem)
                .paste_back(&[(b1, bd.get(p1)), (b2, bd.get(p2))], &cov)?;
            probed(tape, &out, &probe)
        })?);
    }

    // -- losses and fusion ----------------------------------------------
    {
        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let logits = ps.add("logits", &[5], vals(&mut rng, 5))?;
        entries.push(check("softmax_xent", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let (_probs, loss) = bd.get(logits).softmax_xent(2)?;
            Ok(loss)
        })?);

        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let logits = ps.add("logits", &[3, 4], vals(&mut rng, 12))?;
        entries.push(check("weighted_nll", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            bd.get(logits).weighted_nll(&[0, 3, 1], &[0.5, 0.3, 0.2])
        })?);

        let mut rng = rng_for(&mut slot);
        let mut ps = ParamSet::new();
        let l1 = ps.add("l1", &[3, 4], vals(&mut rng, 12))?;
        let l2 = ps.add("l2", &[3, 4], vals(&mut rng, 12))?;
        let a1 = ps.add("a1", &[3], vals(&mut rng, 3))?;
        let a2 = ps.add("a2", &[3], vals(&mut rng, 3))?;
        let probe = vals(&mut rng, 12);
        entries.push(check("attention_fuse", false, ps, move |tape, params| {
            let bd = Binder::new(tape, params);
            let fused =
                Tensor::attention_fuse(&[bd.get(l1), bd.get(l2)], &[bd.get(a1), bd.get(a2)])?;
            probed(tape, &fused, &probe)
        })?);
    }

    // -- end to end -----------------------------------------------------
    entries.push(rollout_loss_entry(rng_for(&mut slot))?);
    entries.push(semantic_step_entry(rng_for(&mut slot))?);
    Ok(entries)
}

/// Values bounded away from zero (|v| in [0.25, 1.0]) so kinked ops like
/// ReLU never land within a finite-difference step of their corner.
fn vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = 0.25 + 0.75 * rng.gen::<f64>();
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Dot the output with a fixed probe vector so every output coordinate
/// influences the scalar with a distinct weight.
fn probed(tape: &Tape, out: &Tensor, probe: &[f64]) -> Result<Tensor> {
    let c = tape.constant(&out.shape(), probe.to_vec())?;
    Ok(out.mul(&c)?.sum())
}

fn check<F>(
    name: &'static str,
    corrupt: bool,
    params: ParamSet,
    build: F,
) -> Result<SuiteEntry>
where
    F: FnMut(&Tape, &ParamSet) -> Result<Tensor>,
{
    check_eps(name, corrupt, DEFAULT_EPS, params, build)
}

fn check_eps<F>(
    name: &'static str,
    corrupt: bool,
    eps: f64,
    mut params: ParamSet,
    build: F,
) -> Result<SuiteEntry>
where
    F: FnMut(&Tape, &ParamSet) -> Result<Tensor>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    let corruption = if corrupt {
        Some(Corruption {
            param: ids[0],
            coord: 0,
        })
    } else {
        None
    };
    let report = finite_diff_check(&mut params, &ids, eps, DEFAULT_TOL, corruption, build)?;
    Ok(SuiteEntry { name, report })
}

fn unary_op<G>(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    probe: Vec<f64>,
    op: G,
) -> Result<SuiteEntry>
where
    G: Fn(&Tensor) -> Result<Tensor>,
{
    let mut ps = ParamSet::new();
    let n: usize = shape.iter().product();
    let x = ps.add("x", shape, vals(rng, n))?;
    check(name, false, ps, move |tape, params| {
        let bd = Binder::new(tape, params);
        let out = op(&bd.get(x))?;
        probed(tape, &out, &probe)
    })
}

fn binary_op<G>(
    name: &'static str,
    corrupt: bool,
    rng: &mut ChaCha8Rng,
    probe: Vec<f64>,
    op: G,
) -> Result<SuiteEntry>
where
    G: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    let mut ps = ParamSet::new();
    let a = ps.add("a", &[2, 3], vals(rng, 6))?;
    let b = ps.add("b", &[2, 3], vals(rng, 6))?;
    check(name, corrupt, ps, move |tape, params| {
        let bd = Binder::new(tape, params);
        let out = op(&bd.get(a), &bd.get(b))?;
        probed(tape, &out, &probe)
    })
}

/// Move every exactly-zero parameter coordinate (bias vectors, zero-init
/// attention heads) to a small random value bounded away from zero. Fresh
/// models pair zero biases with an all-zero memory background, parking
/// some ReLU inputs exactly on the kink, where a central difference
/// measures half the true slope; checking at a generic point instead
/// keeps the comparison meaningful without touching the model itself.
fn randomize_zero_coords(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let zero_coords: Vec<usize> = params
            .data(id)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 0.0)
            .map(|(i, _)| i)
            .collect();
        for i in zero_coords {
            let mag = 0.02 + 0.03 * rng.gen::<f64>();
            params.nudge(id, i, if rng.gen::<bool>() { mag } else { -mag });
        }
    }
}

/// Three regions realizing left/right, above/below and an overlapping
/// pair on an 8x8 grid, with features drawn from the seed.
fn suite_scene(classes: usize, rng: &mut ChaCha8Rng) -> Scene {
    let mk = |x1: f64, y1: f64, x2: f64, y2: f64, label: usize| Region {
        bx: PixelBox::new(x1, y1, x2, y2).unwrap(),
        label,
    };
    let features: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen::<f64>() - 0.5).collect();
    Scene {
        id: "gradsuite".into(),
        grid: (8, 8),
        channels: 3,
        size: (8.0, 8.0),
        features,
        regions: vec![
            mk(1.0, 1.0, 4.0, 4.0, 0),
            mk(5.0, 2.0, 8.0, 5.0, 1 % classes),
            mk(2.0, 3.0, 5.0, 7.0, 3 % classes),
        ],
    }
}

fn suite_cfg(variant: Variant, classes: usize) -> ModelConfig {
    ModelConfig {
        classes,
        feat_channels: 3,
        grid: (8, 8),
        mem_channels: 4,
        conv_channels: 4,
        fc_width: 6,
        crop: 3,
        iterations: 1,
        graph_dim: 4,
        graph_stacks: 2,
        variant,
        ..ModelConfig::default()
    }
}

/// Whole-model check: every parameter of a full-variant rollout (one
/// local round, one graph round, cross-feed wiring present, attention
/// fusion, re-weighted loss) against central differences. The semantic
/// path is disabled because its region/class assignment is a deliberate
/// stop-gradient; the companion entry covers those weights.
fn rollout_loss_entry(mut rng: ChaCha8Rng) -> Result<SuiteEntry> {
    let classes = 4;
    let mut cfg = suite_cfg(Variant::Full, classes);
    cfg.ablations.no_semantic_path = true;
    let mut params = ParamSet::new();
    let model = Model::new(cfg, None, &mut params, &mut rng)?;
    randomize_zero_coords(&mut params, &mut rng);
    let kernel = KernelConfig::new(2.0).unwrap();
    let scene = PreparedScene::new(&suite_scene(classes, &mut rng), &kernel)?;

    let frozen = {
        let tape = Tape::default();
        let b = Binder::new(&tape, &params);
        let rollout = model.forward(&b, &scene)?;
        model.region_weights(&rollout, &scene.labels)
    };
    check_eps("rollout_loss", false, ROLLOUT_EPS, params, move |tape, ps| {
        let b = Binder::new(tape, ps);
        let rollout = model.forward(&b, &scene)?;
        Ok(model.loss_with_weights(&rollout, &scene.labels, &frozen)?.total)
    })
}

/// One reasoner step with the semantic path active. The previous-round
/// probabilities that define the region/class assignment are an explicit
/// argument here, so they stay fixed while the class embedding, the
/// per-edge-type weights and the mapping matrices are checked.
fn semantic_step_entry(mut rng: ChaCha8Rng) -> Result<SuiteEntry> {
    let classes = 8;
    let regions = 3;
    let cfg = suite_cfg(Variant::GlobalOnly, classes);
    let vocab = ClassVocabulary::new(class_names(classes)).unwrap();
    let kg = PreparedKg::new(&default_knowledge_graph(&vocab)).map_err(|e| {
        crate::tensor::TensorError::Invalid {
            op: "gradsuite",
            msg: e.to_string(),
        }
    })?;

    let mut params = ParamSet::new();
    let module = GlobalModule::new(&cfg, &kg.type_names, &mut params, &mut rng)?;
    randomize_zero_coords(&mut params, &mut rng);
    let in_pooled = params.add("in.pooled", &[regions, cfg.feat_channels], vals(&mut rng, regions * cfg.feat_channels))?;
    let in_v = params.add("in.v", &[regions, classes], vals(&mut rng, regions * classes))?;
    let in_mem = params.add("in.mem", &[regions, cfg.graph_dim], vals(&mut rng, regions * cfg.graph_dim))?;

    // Dense asymmetric adjacency so every per-relation weight matters.
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
    let att_probe = vals(&mut rng, regions);
    let kg_mats = kg.mats.clone();

    check_eps("graph_semantic_step", false, ROLLOUT_EPS, params, move |tape, ps| {
        let b = Binder::new(tape, ps);
        let spatial: Vec<Tensor> = adjacency
            .iter()
            .map(|m| tape.constant(&[regions, regions], m.clone()))
            .collect::<Result<_>>()?;
        let kg_t: Vec<Tensor> = kg_mats
            .iter()
            .map(|m| tape.constant(&[classes, classes], m.clone()))
            .collect::<Result<_>>()?;
        let (_, logits, att) = module.iterate(
            &b,
            &b.get(in_pooled),
            &b.get(in_v),
            &b.get(in_mem),
            &spatial,
            &kg_t,
            &prev_probs,
        )?;
        let probe = tape.constant(&[regions], att_probe.clone())?;
        logits
            .weighted_nll(&labels, &nll_weights)?
            .add(&att.mul(&probe)?.sum())
    })
}
