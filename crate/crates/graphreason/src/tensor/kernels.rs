//! Dense f64 kernels shared by the forward and backward passes.
//!
//! All layouts are row-major; rank-3 tensors are height x width x channels
//! with channels fastest.

use crate::geometry::PixelBox;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// dA += dC . B^T
pub fn matmul_grad_a(da: &mut [f64], dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            let dcrow = &dc[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                acc += dcrow[j] * brow[j];
            }
            da[i * k + p] += acc;
        }
    }
}

/// dB += A^T . dC
pub fn matmul_grad_b(db: &mut [f64], dc: &[f64], a: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dcrow = &dc[i * n..(i + 1) * n];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                dbrow[j] += av * dcrow[j];
            }
        }
    }
}

/// Same-padded stride-1 convolution; kernel layout kh x kw x cin x cout.
pub fn conv2d(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    ker: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let ph = kh / 2;
    let pw = kw / 2;
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let orow = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            if let Some(b) = bias {
                orow.copy_from_slice(b);
            }
            for dy in 0..kh {
                let sy = y as isize + dy as isize - ph as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let sx = xx as isize + dx as isize - pw as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let xrow = &x[((sy as usize) * w + sx as usize) * cin..][..cin];
                    let kbase = ((dy * kw + dx) * cin) * cout;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &ker[kbase + ci * cout..][..cout];
                        for co in 0..cout {
                            orow[co] += xv * krow[co];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dx: &mut [f64],
    dk: &mut [f64],
    dbias: Option<&mut [f64]>,
    dout: &[f64],
    x: &[f64],
    ker: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
) {
    let ph = kh / 2;
    let pw = kw / 2;
    if let Some(db) = dbias {
        for y in 0..h {
            for xx in 0..w {
                let drow = &dout[(y * w + xx) * cout..][..cout];
                for co in 0..cout {
                    db[co] += drow[co];
                }
            }
        }
    }
    for y in 0..h {
        for xx in 0..w {
            let drow = &dout[(y * w + xx) * cout..][..cout];
            for dy in 0..kh {
                let sy = y as isize + dy as isize - ph as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx2 in 0..kw {
                    let sx = xx as isize + dx2 as isize - pw as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = ((sy as usize) * w + sx as usize) * cin;
                    let kbase = ((dy * kw + dx2) * cin) * cout;
                    for ci in 0..cin {
                        let krow = &ker[kbase + ci * cout..][..cout];
                        let mut acc = 0.0;
                        for co in 0..cout {
                            acc += drow[co] * krow[co];
                        }
                        dx[src + ci] += acc;
                        let xv = x[src + ci];
                        if xv != 0.0 {
                            let dkrow = &mut dk[kbase + ci * cout..][..cout];
                            for co in 0..cout {
                                dkrow[co] += xv * drow[co];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Linear interpolation taps along one axis: `(lo index, hi index, hi weight)`.
/// Positions are clamped to `[0, size-1]`; an exactly integral position gets
/// weight 0 on the hi tap so copies stay exact.
pub fn line_taps(u: f64, size: usize) -> (usize, usize, f64) {
    let last = (size - 1) as f64;
    let uc = u.clamp(0.0, last);
    let lo = uc.floor();
    let i0 = lo as usize;
    let f = uc - lo;
    let i1 = if f > 0.0 { (i0 + 1).min(size - 1) } else { i0 };
    (i0, i1, f)
}

/// Sample positions for cropping `box_` (in map-pixel coordinates, extent
/// `[0, w] x [0, h]`) to an `oh x ow` output. Output corner pixel centers
/// align with the box corners, so a full box at the same size is an exact
/// copy.
pub fn crop_sample_positions(
    box_: &PixelBox,
    map_h: usize,
    map_w: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>) {
    let to_col = (map_w as f64 - 1.0) / map_w as f64;
    let to_row = (map_h as f64 - 1.0) / map_h as f64;
    let u1 = box_.x1 * to_col;
    let u2 = box_.x2 * to_col;
    let v1 = box_.y1 * to_row;
    let v2 = box_.y2 * to_row;
    let us = axis_positions(u1, u2, ow);
    let vs = axis_positions(v1, v2, oh);
    (us, vs)
}

fn axis_positions(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(a + b) / 2.0];
    }
    let step = b - a;
    let denom = (n - 1) as f64;
    (0..n).map(|j| a + step * j as f64 / denom).collect()
}

/// Position inside a patch (extent align-corners over `box_`) for a point
/// `(px, py)` given in the same frame as the box. Points outside the box
/// extrapolate by clamping to the patch edge.
pub fn patch_position(
    box_: &PixelBox,
    ph: usize,
    pw: usize,
    px: f64,
    py: f64,
) -> (f64, f64) {
    let tx = (px - box_.x1) / (box_.x2 - box_.x1);
    let ty = (py - box_.y1) / (box_.y2 - box_.y1);
    let u = (tx * (pw as f64 - 1.0)).clamp(0.0, pw as f64 - 1.0);
    let v = (ty * (ph as f64 - 1.0)).clamp(0.0, ph as f64 - 1.0);
    (u, v)
}

/// Numerically stable softmax over one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] . [[1],[1]] = [[3],[7]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn conv_all_ones_interior() {
        // 3x3 all-ones kernel over a constant map: interior cells get 9c.
        let c = 2.5;
        let x = vec![c; 5 * 5];
        let ker = vec![1.0; 9];
        let out = conv2d(&x, 5, 5, 1, &ker, 3, 3, 1, None);
        for y in 1..4 {
            for xx in 1..4 {
                assert!((out[y * 5 + xx] - 9.0 * c).abs() < 1e-12);
            }
        }
        // Corner sees a 2x2 window.
        assert!((out[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn taps_exact_on_integers() {
        let (i0, i1, f) = line_taps(3.0, 7);
        assert_eq!((i0, i1), (3, 3));
        assert_eq!(f, 0.0);
        let (i0, i1, f) = line_taps(6.0, 7);
        assert_eq!((i0, i1), (6, 6));
        assert_eq!(f, 0.0);
        let (i0, i1, f) = line_taps(2.25, 7);
        assert_eq!((i0, i1), (2, 3));
        assert!((f - 0.25).abs() < 1e-15);
    }

    #[test]
    fn crop_positions_identity_grid() {
        let b = PixelBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let (us, vs) = crop_sample_positions(&b, 4, 4, 4, 4);
        assert_eq!(us, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(vs, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_hand_case() {
        let p = softmax_row(&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]);
        assert!((p[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((p[2] - 3.0 / 6.0).abs() < 1e-12);
    }
}
