//! Global reasoning over region and class graphs.
//!
//! Regions become rows of a compact memory matrix updated by a gated
//! recurrent rule. A reasoner then propagates evidence along two paths and
//! merges them residually:
//!
//! - **spatial path**: for each region-graph edge type (left/right/above/
//!   below/overlap), gather neighbour rows through the weighted adjacency
//!   and mix channels with a per-type weight matrix.
//! - **semantic path**: project region rows onto class nodes through a
//!   soft assignment built from the previous prediction, add a learned
//!   class embedding, propagate over the knowledge-graph edge types, and
//!   scatter the result back to regions.
//!
//! Several stacked rounds refine the memory (`m_k = m_{k-1} + merge(...)`),
//! and a linear head turns the final rows into logits plus a fusion
//! attention score.

use rand_chacha::ChaCha8Rng;

use crate::local::gru_combine;
use crate::model::{Activation, ModelConfig};
use crate::tensor::params::{xavier_std, Binder, ParamId, ParamSet};
use crate::tensor::{Result, Tensor, TensorError};

/// `sum_e edges[e] . m . weights[e]` — one gather/mix round over the
/// region graph. `edges[e]` is `R x R`, `m` is `R x D`, `weights[e]` is
/// `D x D`.
pub fn spatial_term(edges: &[Tensor], weights: &[Tensor], m: &Tensor) -> Result<Tensor> {
    if edges.len() != weights.len() || edges.is_empty() {
        return Err(TensorError::Invalid {
            op: "spatial_term",
            msg: format!("{} edge types vs {} weights", edges.len(), weights.len()),
        });
    }
    let mut acc: Option<Tensor> = None;
    for (a, w) in edges.iter().zip(weights.iter()) {
        let term = a.matmul(m)?.matmul(w)?;
        acc = Some(match acc {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one edge type"))
}

/// Class-graph propagation: `H = relu(region_to_class . m . w_in +
/// class_emb . w_emb)`, then `sum_e kg_edges[e] . H . per_type_w[e]`.
/// Output is `C x D` (per-class evidence).
#[allow(clippy::too_many_arguments)]
pub fn semantic_term(
    region_to_class: &Tensor,
    m: &Tensor,
    w_in: &Tensor,
    class_emb: &Tensor,
    w_emb: &Tensor,
    kg_edges: &[Tensor],
    per_type_w: &[Tensor],
) -> Result<Tensor> {
    if kg_edges.len() != per_type_w.len() || kg_edges.is_empty() {
        return Err(TensorError::Invalid {
            op: "semantic_term",
            msg: format!(
                "{} knowledge-graph types vs {} weights",
                kg_edges.len(),
                per_type_w.len()
            ),
        });
    }
    let gathered = region_to_class.matmul(m)?.matmul(w_in)?;
    let h = gathered.add(&class_emb.matmul(w_emb)?)?.relu();
    let mut acc: Option<Tensor> = None;
    for (a, w) in kg_edges.iter().zip(per_type_w.iter()) {
        let term = a.matmul(&h)?.matmul(w)?;
        acc = Some(match acc {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one edge type"))
}

/// Merge the two paths into a region-shaped update:
/// `relu(spatial + relu(class_to_region . semantic . w_back))`. Either
/// side may be absent (ablations); with a zero semantic term the result
/// equals `relu(spatial)` exactly.
pub fn merge_terms(
    spatial: Option<&Tensor>,
    semantic: Option<(&Tensor, &Tensor, &Tensor)>,
) -> Result<Tensor> {
    let back = match semantic {
        Some((sem, class_to_region, w_back)) => {
            Some(class_to_region.matmul(sem)?.matmul(w_back)?.relu())
        }
        None => None,
    };
    let total = match (spatial, back) {
        (Some(s), Some(b)) => s.add(&b)?,
        (Some(s), None) => s.clone(),
        (None, Some(b)) => b,
        (None, None) => {
            return Err(TensorError::Invalid {
                op: "merge_terms",
                msg: "both propagation paths are disabled".into(),
            })
        }
    };
    Ok(total.relu())
}

/// Soft region-to-class assignment matrices from detached probabilities
/// (`probs[r * classes + c]`): the forward direction is the probability
/// matrix itself (`R x C`); the reverse direction is its transpose with
/// rows rescaled to unit sum (rows that sum to zero stay zero).
pub fn assignment_matrices(probs: &[f64], regions: usize, classes: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(probs.len(), regions * classes);
    let class_to_region = probs.to_vec();
    let mut region_to_class = vec![0.0; classes * regions];
    for c in 0..classes {
        let mut sum = 0.0;
        for r in 0..regions {
            sum += probs[r * classes + c];
        }
        if sum > 0.0 {
            for r in 0..regions {
                region_to_class[c * regions + r] = probs[r * classes + c] / sum;
            }
        }
    }
    (class_to_region, region_to_class)
}

struct RowGruParams {
    gate_u_w: ParamId,
    gate_u_b: ParamId,
    gate_z_w: ParamId,
    gate_z_b: ParamId,
    cand_x_w: ParamId,
    cand_m_w: ParamId,
    cand_b: ParamId,
}

struct StackParams {
    /// Per spatial edge type, in [`crate::geometry::SpatialEdge::ALL`] order.
    spatial_w: Vec<ParamId>,
    semantic: Option<SemanticParams>,
}

struct SemanticParams {
    w_in: ParamId,
    w_emb: ParamId,
    per_type_w: Vec<ParamId>,
    w_back: ParamId,
}

struct ReasonerParams {
    /// Learned class node embedding; absent when the semantic path is off.
    class_emb: Option<ParamId>,
    stacks: Vec<StackParams>,
}

pub struct GlobalModule {
    classes: usize,
    candidate_act: Activation,
    enc1_w: ParamId,
    enc1_b: ParamId,
    enc2_w: ParamId,
    enc2_b: ParamId,
    gru: Option<RowGruParams>,
    reasoner: Option<ReasonerParams>,
    head_cls_w: ParamId,
    head_cls_b: ParamId,
    head_att_w: ParamId,
    head_att_b: ParamId,
}

impl GlobalModule {
    /// `kg_types` is the number of knowledge-graph edge types the module
    /// will be fed (in sorted name order), `kg_type_names` their names for
    /// parameter labeling.
    pub fn new(
        cfg: &ModelConfig,
        kg_type_names: &[String],
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<GlobalModule> {
        let dg = cfg.graph_dim;
        let dh = cfg.feat_channels;
        let c = cfg.classes;
        let enc_in = dh + c;
        let enc1_w = params.add_normal("global.enc1.w", &[enc_in, dg], xavier_std(enc_in, dg), rng)?;
        let enc1_b = params.add_zeros("global.enc1.b", &[dg])?;
        let enc2_w = params.add_normal("global.enc2.w", &[dg, dg], xavier_std(dg, dg), rng)?;
        let enc2_b = params.add_zeros("global.enc2.b", &[dg])?;

        let gru = if cfg.ablations.no_global_memory {
            None
        } else {
            Some(RowGruParams {
                gate_u_w: params.add_normal(
                    "global.gate_u.w",
                    &[2 * dg, dg],
                    xavier_std(2 * dg, dg),
                    rng,
                )?,
                gate_u_b: params.add_zeros("global.gate_u.b", &[dg])?,
                gate_z_w: params.add_normal(
                    "global.gate_z.w",
                    &[2 * dg, dg],
                    xavier_std(2 * dg, dg),
                    rng,
                )?,
                gate_z_b: params.add_zeros("global.gate_z.b", &[dg])?,
                cand_x_w: params.add_normal("global.cand_x.w", &[dg, dg], xavier_std(dg, dg), rng)?,
                cand_m_w: params.add_normal("global.cand_m.w", &[dg, dg], xavier_std(dg, dg), rng)?,
                cand_b: params.add_zeros("global.cand.b", &[dg])?,
            })
        };

        let reasoner = if cfg.ablations.no_graph_reasoner {
            None
        } else {
            let use_spatial = !cfg.ablations.no_spatial_path;
            let use_semantic = !cfg.ablations.no_semantic_path;
            let class_emb = if use_semantic {
                Some(params.add_normal("global.class_emb", &[c, dg], 1.0, rng)?)
            } else {
                None
            };
            let mut stacks = Vec::with_capacity(cfg.graph_stacks);
            for k in 0..cfg.graph_stacks {
                let mut spatial_w = Vec::new();
                if use_spatial {
                    for e in crate::geometry::SpatialEdge::ALL {
                        spatial_w.push(params.add_normal(
                            &format!("global.s{k}.spatial.{}.w", e.name()),
                            &[dg, dg],
                            xavier_std(dg, dg),
                            rng,
                        )?);
                    }
                }
                let semantic = if use_semantic {
                    let mut per_type_w = Vec::with_capacity(kg_type_names.len());
                    for name in kg_type_names {
                        per_type_w.push(params.add_normal(
                            &format!("global.s{k}.kg.{name}.w"),
                            &[dg, dg],
                            xavier_std(dg, dg),
                            rng,
                        )?);
                    }
                    Some(SemanticParams {
                        w_in: params.add_normal(
                            &format!("global.s{k}.sem_in.w"),
                            &[dg, dg],
                            xavier_std(dg, dg),
                            rng,
                        )?,
                        w_emb: params.add_normal(
                            &format!("global.s{k}.sem_emb.w"),
                            &[dg, dg],
                            xavier_std(dg, dg),
                            rng,
                        )?,
                        per_type_w,
                        w_back: params.add_normal(
                            &format!("global.s{k}.sem_back.w"),
                            &[dg, dg],
                            xavier_std(dg, dg),
                            rng,
                        )?,
                    })
                } else {
                    None
                };
                stacks.push(StackParams { spatial_w, semantic });
            }
            Some(ReasonerParams { class_emb, stacks })
        };

        let head_cls_w = params.add_normal("global.head_cls.w", &[dg, c], xavier_std(dg, c), rng)?;
        let head_cls_b = params.add_zeros("global.head_cls.b", &[c])?;
        let head_att_w = params.add_zeros("global.head_att.w", &[dg, 1])?;
        let head_att_b = params.add_zeros("global.head_att.b", &[1])?;

        Ok(GlobalModule {
            classes: c,
            candidate_act: cfg.candidate_act,
            enc1_w,
            enc1_b,
            enc2_w,
            enc2_b,
            gru,
            reasoner,
            head_cls_w,
            head_cls_b,
            head_att_w,
            head_att_b,
        })
    }

    /// One iteration. `pooled_feat` is `R x Dh`, `v` the per-region input
    /// logits (`R x C`), `memory` the previous state (`R x Dg`),
    /// `spatial_edges` the five `R x R` adjacency constants,
    /// `kg_edges` the `C x C` knowledge-graph constants (sorted type
    /// order), and `prev_probs` the detached probabilities that define the
    /// region/class assignment. Returns `(new memory, logits, attention)`.
    #[allow(clippy::too_many_arguments)]
    pub fn iterate(
        &self,
        b: &Binder,
        pooled_feat: &Tensor,
        v: &Tensor,
        memory: &Tensor,
        spatial_edges: &[Tensor],
        kg_edges: &[Tensor],
        prev_probs: &[f64],
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let regions = v.shape()[0];
        let x = Tensor::concat_last(&[pooled_feat, v])?
            .matmul(&b.get(self.enc1_w))?
            .add_row_vec(&b.get(self.enc1_b))?
            .relu()
            .matmul(&b.get(self.enc2_w))?
            .add_row_vec(&b.get(self.enc2_b))?;

        let mem = match &self.gru {
            Some(g) => {
                let both = Tensor::concat_last(&[&x, memory])?;
                let u = both
                    .matmul(&b.get(g.gate_u_w))?
                    .add_row_vec(&b.get(g.gate_u_b))?
                    .sigmoid();
                let z = both
                    .matmul(&b.get(g.gate_z_w))?
                    .add_row_vec(&b.get(g.gate_z_b))?
                    .sigmoid();
                let pre = x
                    .matmul(&b.get(g.cand_x_w))?
                    .add(&z.mul(memory)?.matmul(&b.get(g.cand_m_w))?)?
                    .add_row_vec(&b.get(g.cand_b))?;
                let cand = self.candidate_act.apply(&pre);
                gru_combine(memory, &cand, &u)?
            }
            None => x,
        };

        let out = match &self.reasoner {
            Some(r) => {
                let (c2r, r2c) =
                    assignment_matrices(prev_probs, regions, self.classes);
                let tape = b.tape();
                let class_to_region = tape.constant(&[regions, self.classes], c2r)?;
                let region_to_class = tape.constant(&[self.classes, regions], r2c)?;
                let class_emb = r.class_emb.map(|id| b.get(id));
                let mut m = mem.clone();
                for stack in &r.stacks {
                    let spatial = if stack.spatial_w.is_empty() {
                        None
                    } else {
                        let ws: Vec<Tensor> =
                            stack.spatial_w.iter().map(|&w| b.get(w)).collect();
                        Some(spatial_term(spatial_edges, &ws, &m)?)
                    };
                    let update = match &stack.semantic {
                        Some(sp) => {
                            let ws: Vec<Tensor> =
                                sp.per_type_w.iter().map(|&w| b.get(w)).collect();
                            let emb = class_emb.as_ref().expect("semantic path has an embedding");
                            let sem = semantic_term(
                                &region_to_class,
                                &m,
                                &b.get(sp.w_in),
                                emb,
                                &b.get(sp.w_emb),
                                kg_edges,
                                &ws,
                            )?;
                            let w_back = b.get(sp.w_back);
                            merge_terms(
                                spatial.as_ref(),
                                Some((&sem, &class_to_region, &w_back)),
                            )?
                        }
                        None => merge_terms(spatial.as_ref(), None)?,
                    };
                    m = m.add(&update)?;
                }
                m
            }
            None => mem.clone(),
        };

        let logits = out
            .matmul(&b.get(self.head_cls_w))?
            .add_row_vec(&b.get(self.head_cls_b))?;
        let att = out
            .matmul(&b.get(self.head_att_w))?
            .add_row_vec(&b.get(self.head_att_b))?
            .reshape(&[regions])?;
        Ok((mem, logits, att))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tape};

    fn eye(n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        v
    }

    #[test]
    fn spatial_term_identity_graph_identity_weights_is_exact() {
        let t = Tape::new(Precision::F64);
        let m_data = vec![0.3, -1.7, 2.5, 0.001, -42.125, 7.0];
        let m = t.constant(&[3, 2], m_data.clone()).unwrap();
        let a = t.constant(&[3, 3], eye(3)).unwrap();
        let w = t.constant(&[2, 2], eye(2)).unwrap();
        let out = spatial_term(&[a], &[w], &m).unwrap();
        assert_eq!(out.value(), m_data);
    }

    #[test]
    fn spatial_term_sums_edge_types() {
        let t = Tape::new(Precision::F64);
        let m = t.constant(&[2, 1], vec![1.0, 10.0]).unwrap();
        // Type 1: row gather of the other node; type 2: self loops.
        let a1 = t.constant(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a2 = t.constant(&[2, 2], eye(2)).unwrap();
        let w1 = t.constant(&[1, 1], vec![2.0]).unwrap();
        let w2 = t.constant(&[1, 1], vec![0.5]).unwrap();
        let out = spatial_term(&[a1, a2], &[w1, w2], &m).unwrap();
        // node0: 2*10 + 0.5*1 = 20.5; node1: 2*1 + 0.5*10 = 7
        assert_eq!(out.value(), vec![20.5, 7.0]);
    }

    #[test]
    fn merge_with_zero_semantic_equals_relu_spatial_exactly() {
        let t = Tape::new(Precision::F64);
        let spatial = t
            .constant(&[2, 2], vec![0.5, -0.25, -1e-9, 3.75])
            .unwrap();
        let sem = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let c2r = t.constant(&[2, 2], vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let w_back = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let merged = merge_terms(Some(&spatial), Some((&sem, &c2r, &w_back))).unwrap();
        assert_eq!(merged.value(), vec![0.5, 0.0, 0.0, 3.75]);
    }

    #[test]
    fn semantic_term_hand_case() {
        // 2 regions, 2 classes, 1-d features; all weights identity-like.
        let t = Tape::new(Precision::F64);
        let m = t.constant(&[2, 1], vec![4.0, 8.0]).unwrap();
        // Region 0 fully class 0; region 1 fully class 1.
        let r2c = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w_in = t.constant(&[1, 1], vec![1.0]).unwrap();
        let emb = t.constant(&[2, 1], vec![0.0, 0.0]).unwrap();
        let w_emb = t.constant(&[1, 1], vec![1.0]).unwrap();
        // One edge type: class 0 -> class 1.
        let kg = t.constant(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let w_e = t.constant(&[1, 1], vec![3.0]).unwrap();
        let out = semantic_term(&r2c, &m, &w_in, &emb, &w_emb, &[kg], &[w_e]).unwrap();
        // H = relu([4, 8]); propagation: class0 gathers class1 -> 8*3 = 24.
        assert_eq!(out.value(), vec![24.0, 0.0]);
    }

    #[test]
    fn assignment_matrices_normalize_reverse_rows() {
        // 2 regions, 2 classes.
        let probs = vec![0.75, 0.25, 0.25, 0.75];
        let (c2r, r2c) = assignment_matrices(&probs, 2, 2);
        assert_eq!(c2r, probs);
        // Class 0 row: (0.75, 0.25) / 1.0
        assert_eq!(r2c[0], 0.75);
        assert_eq!(r2c[1], 0.25);
        assert_eq!(r2c[2], 0.25);
        assert_eq!(r2c[3], 0.75);
    }

    #[test]
    fn assignment_matrices_leave_empty_class_rows_zero() {
        let probs = vec![1.0, 0.0, 1.0, 0.0];
        let (_, r2c) = assignment_matrices(&probs, 2, 2);
        assert_eq!(&r2c[2..4], &[0.0, 0.0]);
    }
}
