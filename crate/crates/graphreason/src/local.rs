//! Local reasoning over a convolutional spatial memory.
//!
//! Each iteration, every region writes into a shared `H x W x D` memory
//! grid: its feature-map crop is fused with its current class logits,
//! passed through a gated recurrent update against the memory content
//! under its box, and pasted back with coverage-weighted blending. Reading
//! happens after a small stack of 3x3 convolutions over the whole memory,
//! so a region's crop reflects what its neighbours wrote; pooled crops
//! feed fully-connected layers that emit class logits and a fusion
//! attention score per region.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::geometry::{CoverageWeights, PixelBox};
use crate::model::{Activation, ModelConfig};
use crate::tensor::params::{kaiming_std, xavier_std, Binder, ParamId, ParamSet};
use crate::tensor::{Result, Tensor};

/// Gated blend `u * s + (1 - u) * cand`. With `u` identically one the
/// result is bit-identical to `s`: `1 * s + 0 * cand` involves only exact
/// float operations.
pub fn gru_combine(s: &Tensor, cand: &Tensor, u: &Tensor) -> Result<Tensor> {
    let keep = u.mul(s)?;
    let take = u.affine(-1.0, 1.0).mul(cand)?;
    keep.add(&take)
}

/// Parameters of the memory write path; absent when the spatial memory is
/// ablated away.
struct WriteParams {
    fuse1_w: ParamId,
    fuse1_b: ParamId,
    fuse2_w: ParamId,
    fuse2_b: ParamId,
    gate_u_w: ParamId,
    gate_u_b: ParamId,
    gate_z_w: ParamId,
    gate_z_b: ParamId,
    cand_f_w: ParamId,
    cand_s_w: ParamId,
    cand_b: ParamId,
}

pub struct LocalModule {
    crop: usize,
    classes: usize,
    candidate_act: Activation,
    write: Option<WriteParams>,
    /// 3x3 context convolutions (weight, bias); empty when ablated.
    ctx: Vec<(ParamId, ParamId)>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    head_cls_w: ParamId,
    head_cls_b: ParamId,
    head_att_w: ParamId,
    head_att_b: ParamId,
}

impl LocalModule {
    pub fn new(
        cfg: &ModelConfig,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<LocalModule> {
        let d = cfg.mem_channels;
        let dh = cfg.feat_channels;
        let c = cfg.classes;
        let k = cfg.conv_channels;
        let f = cfg.fc_width;
        let crop = cfg.crop;
        let use_memory = !cfg.ablations.no_spatial_memory;
        let use_context = !cfg.ablations.no_local_context;

        let write = if use_memory {
            let fin = dh + c;
            Some(WriteParams {
                fuse1_w: params.add_normal("local.fuse1.w", &[1, 1, fin, d], kaiming_std(fin), rng)?,
                fuse1_b: params.add_zeros("local.fuse1.b", &[d])?,
                fuse2_w: params.add_normal("local.fuse2.w", &[1, 1, d, d], xavier_std(d, d), rng)?,
                fuse2_b: params.add_zeros("local.fuse2.b", &[d])?,
                gate_u_w: params.add_normal(
                    "local.gate_u.w",
                    &[1, 1, 2 * d, d],
                    xavier_std(2 * d, d),
                    rng,
                )?,
                gate_u_b: params.add_zeros("local.gate_u.b", &[d])?,
                gate_z_w: params.add_normal(
                    "local.gate_z.w",
                    &[1, 1, 2 * d, d],
                    xavier_std(2 * d, d),
                    rng,
                )?,
                gate_z_b: params.add_zeros("local.gate_z.b", &[d])?,
                cand_f_w: params.add_normal("local.cand_f.w", &[1, 1, d, d], xavier_std(d, d), rng)?,
                cand_s_w: params.add_normal("local.cand_s.w", &[1, 1, d, d], xavier_std(d, d), rng)?,
                cand_b: params.add_zeros("local.cand.b", &[d])?,
            })
        } else {
            None
        };

        // Context convs read the memory, or the raw feature grid when the
        // memory is ablated away.
        let ctx_in = if use_memory { d } else { dh };
        let mut ctx = Vec::new();
        if use_context {
            let widths = [(ctx_in, k), (k, k), (k, k)];
            for (i, (cin, cout)) in widths.iter().enumerate() {
                let w = params.add_normal(
                    &format!("local.ctx{}.w", i + 1),
                    &[3, 3, *cin, *cout],
                    kaiming_std(9 * cin),
                    rng,
                )?;
                let b = params.add_zeros(&format!("local.ctx{}.b", i + 1), &[*cout])?;
                ctx.push((w, b));
            }
        }

        let fc_in = if use_context { k } else { crop * crop * ctx_in };
        let fc1_w = params.add_normal("local.fc1.w", &[fc_in, f], kaiming_std(fc_in), rng)?;
        let fc1_b = params.add_zeros("local.fc1.b", &[f])?;
        let fc2_w = params.add_normal("local.fc2.w", &[f, f], kaiming_std(f), rng)?;
        let fc2_b = params.add_zeros("local.fc2.b", &[f])?;
        let head_cls_w = params.add_normal("local.head_cls.w", &[f, c], xavier_std(f, c), rng)?;
        let head_cls_b = params.add_zeros("local.head_cls.b", &[c])?;
        let head_att_w = params.add_zeros("local.head_att.w", &[f, 1])?;
        let head_att_b = params.add_zeros("local.head_att.b", &[1])?;

        Ok(LocalModule {
            crop,
            classes: c,
            candidate_act: cfg.candidate_act,
            write,
            ctx,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            head_cls_w,
            head_cls_b,
            head_att_w,
            head_att_b,
        })
    }

    /// Write all regions into the memory and read fresh predictions.
    /// Returns `(updated memory, logits R x C, attention R)`.
    ///
    /// `features` is the backbone grid (`H x W x Dh`), `memory` the current
    /// memory (`H x W x D`), `v` the per-region input logits (`R x C`), and
    /// `boxes` the regions in grid-pixel coordinates, paired with `cov`.
    pub fn iterate(
        &self,
        b: &Binder,
        features: &Tensor,
        memory: &Tensor,
        v: &Tensor,
        boxes: &[PixelBox],
        cov: &Arc<CoverageWeights>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let crop = self.crop;
        let memory = if let Some(wp) = &self.write {
            let mut patches = Vec::with_capacity(boxes.len());
            for (r, bx) in boxes.iter().enumerate() {
                let f_crop = features.crop_and_resize(bx, crop, crop)?;
                let v_map = v.row(r)?.broadcast_hw(crop, crop)?;
                let fused = Tensor::concat_last(&[&f_crop, &v_map])?
                    .conv2d(&b.get(wp.fuse1_w), Some(&b.get(wp.fuse1_b)))?
                    .relu()
                    .conv2d(&b.get(wp.fuse2_w), Some(&b.get(wp.fuse2_b)))?;
                let s_r = memory.crop_and_resize(bx, crop, crop)?;
                let both = Tensor::concat_last(&[&fused, &s_r])?;
                let u = both
                    .conv2d(&b.get(wp.gate_u_w), Some(&b.get(wp.gate_u_b)))?
                    .sigmoid();
                let z = both
                    .conv2d(&b.get(wp.gate_z_w), Some(&b.get(wp.gate_z_b)))?
                    .sigmoid();
                let pre = fused
                    .conv2d(&b.get(wp.cand_f_w), Some(&b.get(wp.cand_b)))?
                    .add(&z.mul(&s_r)?.conv2d(&b.get(wp.cand_s_w), None)?)?;
                let cand = self.candidate_act.apply(&pre);
                patches.push((*bx, gru_combine(&s_r, &cand, &u)?));
            }
            memory.paste_back(&patches, cov)?
        } else {
            memory.clone()
        };

        let base = if self.write.is_some() { &memory } else { features };
        let descriptors: Vec<Tensor> = if self.ctx.is_empty() {
            boxes
                .iter()
                .map(|bx| {
                    let patch = base.crop_and_resize(bx, crop, crop)?;
                    let n: usize = patch.shape().iter().product();
                    patch.reshape(&[n])
                })
                .collect::<Result<_>>()?
        } else {
            let mut ctx = base.clone();
            for (w, bias) in &self.ctx {
                ctx = ctx.conv2d(&b.get(*w), Some(&b.get(*bias)))?.relu();
            }
            boxes
                .iter()
                .map(|bx| ctx.crop_and_resize(bx, crop, crop)?.mean_spatial())
                .collect::<Result<_>>()?
        };
        let refs: Vec<&Tensor> = descriptors.iter().collect();
        let x = Tensor::stack_rows(&refs)?;
        let h = x
            .matmul(&b.get(self.fc1_w))?
            .add_row_vec(&b.get(self.fc1_b))?
            .relu()
            .matmul(&b.get(self.fc2_w))?
            .add_row_vec(&b.get(self.fc2_b))?
            .relu();
        let logits = h
            .matmul(&b.get(self.head_cls_w))?
            .add_row_vec(&b.get(self.head_cls_b))?;
        let att = h
            .matmul(&b.get(self.head_att_w))?
            .add_row_vec(&b.get(self.head_att_b))?
            .reshape(&[boxes.len()])?;
        debug_assert_eq!(logits.shape(), vec![boxes.len(), self.classes]);
        Ok((memory, logits, att))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Tape};

    #[test]
    fn gru_combine_with_full_gate_is_bit_exact_identity() {
        let t = Tape::new(Precision::F64);
        let s = t
            .constant(&[2, 2, 1], vec![0.123456789, -7.25, 1e-13, 42.0])
            .unwrap();
        let cand = t.constant(&[2, 2, 1], vec![9.9, -9.9, 5.0, -5.0]).unwrap();
        let ones = t.constant(&[2, 2, 1], vec![1.0; 4]).unwrap();
        let out = gru_combine(&s, &cand, &ones).unwrap();
        assert_eq!(out.value(), s.value());
    }

    #[test]
    fn gru_combine_with_zero_gate_is_candidate() {
        let t = Tape::new(Precision::F64);
        let s = t.constant(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let cand = t.constant(&[1, 1, 2], vec![-3.0, 4.0]).unwrap();
        let zeros = t.constant(&[1, 1, 2], vec![0.0; 2]).unwrap();
        let out = gru_combine(&s, &cand, &zeros).unwrap();
        assert_eq!(out.value(), cand.value());
    }

    #[test]
    fn gru_combine_interpolates() {
        let t = Tape::new(Precision::F64);
        let s = t.constant(&[1, 1, 1], vec![2.0]).unwrap();
        let cand = t.constant(&[1, 1, 1], vec![6.0]).unwrap();
        let half = t.constant(&[1, 1, 1], vec![0.25]).unwrap();
        let out = gru_combine(&s, &cand, &half).unwrap();
        // 0.25 * 2 + 0.75 * 6 = 5
        assert!((out.value()[0] - 5.0).abs() < 1e-15);
    }
}
