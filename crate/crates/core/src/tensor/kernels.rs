//! Raw slice kernels shared by the value API and the tape's backward rules.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_axis(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..len {
                let e = (data[at(i)] - max).exp();
                out[at(i)] = e;
                sum += e;
            }
            for i in 0..len {
                out[at(i)] /= sum;
            }
        }
    }
    out
}

pub fn log_softmax_axis(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let max = (0..len).map(|i| data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|i| (data[at(i)] - max).exp()).sum::<f64>().ln();
            for i in 0..len {
                out[at(i)] = data[at(i)] - lse;
            }
        }
    }
    out
}

fn view<'a>(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> ArrayView2<'a, f64> {
    let v = ArrayView2::from_shape((rows, cols), data).expect("matrix view");
    if transposed {
        v.reversed_axes()
    } else {
        v
    }
}

/// `out (+)= op(a) @ op(b)` where `a` is stored `a_rows x a_cols` row-major and
/// `op` optionally transposes. `accumulate` selects beta = 1 over beta = 0.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into(
    out: &mut [f64],
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    accumulate: bool,
) {
    let av = view(a, a_rows, a_cols, trans_a);
    let bv = view(b, b_rows, b_cols, trans_b);
    let (m, n) = (av.nrows(), bv.ncols());
    debug_assert_eq!(av.ncols(), bv.nrows());
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("output view");
    general_mat_mul(1.0, &av, &bv, if accumulate { 1.0 } else { 0.0 }, &mut cv);
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_into(&mut out, a, m, k, false, b, k, n, false, false);
    out
}

pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    // Stride in the input for a unit step along each output axis.
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            src -= strides[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    (new_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn select(data: &[f64], shape: &[usize], axis: usize, indices: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut new_shape = shape.to_vec();
    new_shape[axis] = indices.len();
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * len + i) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    (new_shape, out)
}

/// Adjoint of [`select`]: scatter-adds `grad` back into a buffer of `shape`.
pub fn select_backward(grad: &[f64], shape: &[usize], axis: usize, indices: &[usize]) -> Vec<f64> {
    let (outer, len, inner) = axis_layout(shape, axis);
    let mut out = vec![0.0; shape.iter().product()];
    let mut src = 0;
    for o in 0..outer {
        for &i in indices {
            let start = (o * len + i) * inner;
            for (dst, g) in out[start..start + inner].iter_mut().zip(&grad[src..src + inner]) {
                *dst += g;
            }
            src += inner;
        }
    }
    out
}

/// Same-padded 1-D convolution along the last axis.
///
/// `x` is `[batch, c_in, len]`, `w` is `[width, c_out, c_in]` with odd `width`;
/// output `[batch, c_out, len]` with
/// `y[b, o, t] = sum_{k, i} w[k, o, i] * x[b, i, t + k - width / 2]`
/// and zeros outside `0..len`.
pub struct Conv1dDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub width: usize,
}

impl Conv1dDims {
    fn pad(&self) -> isize {
        (self.width / 2) as isize
    }

    /// Unfolds `x` into rows `(b, t)` and columns `(k, i)`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Conv1dDims { batch, c_in, len, width, .. } = *self;
        let mut cols = vec![0.0; batch * len * width * c_in];
        for b in 0..batch {
            for t in 0..len {
                let row = (b * len + t) * width * c_in;
                for k in 0..width {
                    let s = t as isize + k as isize - self.pad();
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    for i in 0..c_in {
                        cols[row + k * c_in + i] = x[(b * c_in + i) * len + s as usize];
                    }
                }
            }
        }
        cols
    }

    /// `[width, c_out, c_in]` -> `[(k, i), o]`.
    fn weight_matrix(&self, w: &[f64]) -> Vec<f64> {
        let Conv1dDims { c_in, c_out, width, .. } = *self;
        let mut wm = vec![0.0; width * c_in * c_out];
        for k in 0..width {
            for o in 0..c_out {
                for i in 0..c_in {
                    wm[(k * c_in + i) * c_out + o] = w[(k * c_out + o) * c_in + i];
                }
            }
        }
        wm
    }

    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let Conv1dDims { batch, c_in, c_out, len, width } = *self;
        let cols = self.im2col(x);
        let wm = self.weight_matrix(w);
        let rows = batch * len;
        let mut y_bt = vec![0.0; rows * c_out];
        gemm_into(&mut y_bt, &cols, rows, width * c_in, false, &wm, width * c_in, c_out, false, false);
        // [(b, t), o] -> [b, o, t]
        let (_, y) = permute(&y_bt, &[batch, len, c_out], &[0, 2, 1]);
        y
    }

    /// Returns (grad_x, grad_w) for upstream gradient `g` of shape `[batch, c_out, len]`.
    pub fn backward(&self, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let Conv1dDims { batch, c_in, c_out, len, width } = *self;
        let rows = batch * len;
        let kc = width * c_in;
        let (_, g_bt) = permute(g, &[batch, c_out, len], &[0, 2, 1]);
        let cols = self.im2col(x);
        let wm = self.weight_matrix(w);

        let mut gwm = vec![0.0; kc * c_out];
        gemm_into(&mut gwm, &cols, rows, kc, true, &g_bt, rows, c_out, false, false);
        let mut gw = vec![0.0; w.len()];
        for k in 0..width {
            for o in 0..c_out {
                for i in 0..c_in {
                    gw[(k * c_out + o) * c_in + i] = gwm[(k * c_in + i) * c_out + o];
                }
            }
        }

        let mut gcols = vec![0.0; rows * kc];
        gemm_into(&mut gcols, &g_bt, rows, c_out, false, &wm, kc, c_out, true, false);
        let mut gx = vec![0.0; x.len()];
        for b in 0..batch {
            for t in 0..len {
                let row = (b * len + t) * kc;
                for k in 0..width {
                    let s = t as isize + k as isize - self.pad();
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    for i in 0..c_in {
                        gx[(b * c_in + i) * len + s as usize] += gcols[row + k * c_in + i];
                    }
                }
            }
        }
        (gx, gw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm_into(&mut out, &a, 2, 2, true, &b, 2, 2, false, false);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm_into(&mut out, &a, 2, 2, false, &b, 2, 2, true, false);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let dims = Conv1dDims { batch: 2, c_in: 3, c_out: 2, len: 5, width: 3 };
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..18).map(|i| (i as f64 * 0.71).cos()).collect();
        let y = dims.forward(&x, &w);
        for b in 0..2 {
            for o in 0..2 {
                for t in 0..5isize {
                    let mut acc = 0.0;
                    for k in 0..3isize {
                        let s = t + k - 1;
                        if !(0..5).contains(&s) {
                            continue;
                        }
                        for i in 0..3 {
                            acc += w[(k as usize * 2 + o) * 3 + i] * x[(b * 3 + i) * 5 + s as usize];
                        }
                    }
                    let got = y[(b * 2 + o) * 5 + t as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
