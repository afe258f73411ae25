//! Central-difference verification of analytic gradients.
//!
//! The harness evaluates the analytic gradient once via backward, then
//! perturbs every parameter coordinate by `+/-eps` and compares against the
//! numeric slope. Relative error uses `|a - n| / max(1, |a|, |n|)` so tiny
//! gradients do not blow up the ratio. An optional corruption hook doubles
//! one analytic coordinate before comparison, proving the harness can see a
//! wrong adjoint.

use super::params::{ParamId, ParamSet};
use super::{Result, Tape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Doubles the analytic gradient of one coordinate before comparison, to
/// demonstrate the check catches a bad backward rule.
#[derive(Debug, Clone, Copy)]
pub struct Corruption {
    pub param: ParamId,
    pub coord: usize,
}

#[derive(Debug, Clone)]
pub struct CoordFailure {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CoordFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

const MAX_REPORTED_FAILURES: usize = 16;

/// Check `d loss / d params` for every coordinate of `ids`.
///
/// `build` must construct the loss for the current parameter values on the
/// tape it is given and return the scalar root; it is called once for the
/// analytic pass and twice per coordinate for the numeric slopes. The
/// builder must not capture tensors from a previous tape.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    ids: &[ParamId],
    eps: f64,
    tol: f64,
    corruption: Option<Corruption>,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tape, &ParamSet) -> Result<Tensor>,
{
    params.clear_grads();
    let tape = Tape::default();
    let root = build(&tape, params)?;
    tape.backward(&root, params)?;
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
    for &id in ids {
        analytic.push(
            params
                .take_grad(id)
                .unwrap_or_else(|| vec![0.0; params.data(id).len()]),
        );
    }
    params.clear_grads();
    if let Some(c) = corruption {
        if let Some(pos) = ids.iter().position(|&id| id == c.param) {
            analytic[pos][c.coord] *= 2.0;
        }
    }

    let mut report = GradCheckReport::default();
    for (slot, &id) in ids.iter().enumerate() {
        let n = params.data(id).len();
        for coord in 0..n {
            params.nudge(id, coord, eps);
            let up = eval(&mut build, params)?;
            params.nudge(id, coord, -2.0 * eps);
            let down = eval(&mut build, params)?;
            params.nudge(id, coord, eps);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[slot][coord];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            if rel > tol && report.failures.len() < MAX_REPORTED_FAILURES {
                report.failures.push(CoordFailure {
                    param: params.name(id).to_string(),
                    coord,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

fn eval<F>(build: &mut F, params: &ParamSet) -> Result<f64>
where
    F: FnMut(&Tape, &ParamSet) -> Result<Tensor>,
{
    let tape = Tape::default();
    let root = build(&tape, params)?;
    Ok(root.scalar_value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::Binder;

    #[test]
    fn quadratic_passes() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[3], vec![0.3, -1.2, 2.0]).unwrap();
        let ids = [w];
        let report = finite_diff_check(
            &mut ps,
            &ids,
            DEFAULT_EPS,
            DEFAULT_TOL,
            None,
            |tape, params| {
                let b = Binder::new(tape, params);
                let wt = b.get(w);
                Ok(wt.mul(&wt)?.sum())
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn nonlinear_chain_passes() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[4], vec![0.5, -0.25, 1.5, -1.0]).unwrap();
        let b = ps.add("b", &[4], vec![0.1, 0.2, -0.3, 0.0]).unwrap();
        let ids = [w, b];
        let report = finite_diff_check(
            &mut ps,
            &ids,
            DEFAULT_EPS,
            DEFAULT_TOL,
            None,
            |tape, params| {
                let bind = Binder::new(tape, params);
                let wt = bind.get(w);
                let bt = bind.get(b);
                Ok(wt.tanh().mul(&bt.sigmoid())?.sum())
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn conv_crop_paste_pipeline_passes() {
        use crate::geometry::{coverage_weights, PixelBox};
        use std::sync::Arc;

        let mut ps = ParamSet::new();
        let x = ps
            .add(
                "x",
                &[4, 4, 2],
                (0..32).map(|i| (i as f64 * 0.7).sin()).collect(),
            )
            .unwrap();
        let k = ps
            .add(
                "k",
                &[3, 3, 2, 2],
                (0..36).map(|i| (i as f64 * 0.3).cos() * 0.5).collect(),
            )
            .unwrap();
        let bias = ps.add("bias", &[2], vec![0.05, -0.05]).unwrap();
        let patch = ps
            .add("patch", &[2, 2, 2], (0..8).map(|i| i as f64 * 0.2).collect())
            .unwrap();
        let b1 = PixelBox::new(0.5, 0.5, 2.5, 3.0).unwrap();
        let cov = Arc::new(coverage_weights(&[b1], (4, 4), (4.0, 4.0)).unwrap());
        let ids = [x, k, bias, patch];
        let report = finite_diff_check(
            &mut ps,
            &ids,
            DEFAULT_EPS,
            DEFAULT_TOL,
            None,
            |tape, params| {
                let bind = Binder::new(tape, params);
                let xt = bind.get(x);
                let kt = bind.get(k);
                let bt = bind.get(bias);
                let pt = bind.get(patch);
                let conv = xt.conv2d(&kt, Some(&bt))?.tanh();
                let pasted = conv.paste_back(&[(b1, pt)], &cov)?;
                let crop = pasted.crop_and_resize(&PixelBox::new(0.7, 0.2, 3.4, 3.9)?, 3, 3)?;
                Ok(crop.mul(&crop)?.sum())
            },
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} failures {:?}",
            report.max_rel_err,
            report.failures
        );
    }

    #[test]
    fn fuse_and_weighted_nll_pipeline_passes() {
        let mut ps = ParamSet::new();
        let l1 = ps
            .add("l1", &[2, 3], vec![0.4, -0.2, 0.9, 1.1, 0.0, -0.6])
            .unwrap();
        let l2 = ps
            .add("l2", &[2, 3], vec![-0.3, 0.8, 0.1, 0.2, -0.9, 0.5])
            .unwrap();
        let a1 = ps.add("a1", &[2], vec![0.3, -0.4]).unwrap();
        let a2 = ps.add("a2", &[2], vec![-0.1, 0.6]).unwrap();
        let ids = [l1, l2, a1, a2];
        let report = finite_diff_check(
            &mut ps,
            &ids,
            DEFAULT_EPS,
            DEFAULT_TOL,
            None,
            |tape, params| {
                let bind = Binder::new(tape, params);
                let fused = crate::tensor::Tensor::attention_fuse(
                    &[bind.get(l1), bind.get(l2)],
                    &[bind.get(a1), bind.get(a2)],
                )?;
                fused.weighted_nll(&[2, 0], &[0.3, 0.7])
            },
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} failures {:?}",
            report.max_rel_err,
            report.failures
        );
    }

    #[test]
    fn matmul_rowvec_softmax_pipeline_passes() {
        let mut ps = ParamSet::new();
        let w = ps
            .add("w", &[3, 2], vec![0.3, -0.5, 0.8, 0.2, -0.1, 0.4])
            .unwrap();
        let b = ps.add("b", &[2], vec![0.1, -0.2]).unwrap();
        let x = ps
            .add("x", &[2, 3], vec![1.0, 0.5, -0.5, -1.0, 0.25, 0.75])
            .unwrap();
        let ids = [w, b, x];
        let report = finite_diff_check(
            &mut ps,
            &ids,
            DEFAULT_EPS,
            DEFAULT_TOL,
            None,
            |tape, params| {
                let bind = Binder::new(tape, params);
                let z = bind.get(x).matmul(&bind.get(w))?.add_row_vec(&bind.get(b))?;
                let r0 = z.row(0)?;
                let (_, loss0) = r0.softmax_xent(1)?;
                let pooled = z.relu().mean();
                loss0.add(&pooled)
            },
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} failures {:?}",
            report.max_rel_err,
            report.failures
        );
    }

    #[test]
    fn corruption_is_caught() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let ids = [w];
        let report = finite_diff_check(
            &mut ps,
            &ids,
            DEFAULT_EPS,
            DEFAULT_TOL,
            Some(Corruption { param: w, coord: 1 }),
            |tape, params| {
                let b = Binder::new(tape, params);
                let wt = b.get(w);
                Ok(wt.mul(&wt)?.sum())
            },
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].coord, 1);
    }
}
