//! Batched convolution via im2col + GEMM, nearest upsampling, ReLU.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Unfolds `(N, C, H, W)` into `(C*k*k, N*Ho*Wo)`.
fn im2col<T: Real>(x: &Array4<T>, g: ConvGeom) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = g.out_size(h, w);
    let k = g.kernel;
    let cols_per = ho * wo;
    let mut cols = Array2::<T>::zeros((c * k * k, n * cols_per));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let out = cols.as_slice_mut().expect("fresh array");
    let total = n * cols_per;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * total..(row + 1) * total];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let drow = &mut dst[ni * cols_per + oy * wo..ni * cols_per + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[base + iy as usize * w..base + (iy as usize + 1) * w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds `(C*k*k, N*Ho*Wo)` column gradients back onto an `(N, C, H, W)` input.
fn col2im<T: Real>(cols: &Array2<T>, dims: (usize, usize, usize, usize), g: ConvGeom) -> Array4<T> {
    let (n, c, h, w) = dims;
    let (ho, wo) = g.out_size(h, w);
    let k = g.kernel;
    let cols_per = ho * wo;
    let total = n * cols_per;
    let mut dx = Array4::<T>::zeros(dims);
    let cs = cols.as_slice().expect("standard layout");
    let out = dx.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * total..(row + 1) * total];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[ni * cols_per + oy * wo..ni * cols_per + (oy + 1) * wo];
                        let drow = &mut out[base + iy as usize * w..base + (iy as usize + 1) * w];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] = drow[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(Cout, N*P)` matrix to `(N, Cout, Ho, Wo)`.
fn unflatten<T: Real>(m: Array2<T>, n: usize, ho: usize, wo: usize) -> Array4<T> {
    let cout = m.dim().0;
    m.into_shape_with_order((cout, n, ho, wo))
        .expect("sizes agree")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

fn flatten<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * h * w))
        .expect("sizes agree")
}

/// Returns the output and the unfolded input needed for the backward pass.
pub(crate) fn conv_forward<T: Real>(
    x: &Array4<T>,
    weight: ArrayView2<'_, T>,
    bias: &[T],
    g: ConvGeom,
) -> (Array4<T>, Array2<T>) {
    let (n, _, h, w) = x.dim();
    let (ho, wo) = g.out_size(h, w);
    let cols = im2col(x, g);
    let cout = weight.dim().0;
    let mut out = Array2::<T>::zeros((cout, n * ho * wo));
    general_mat_mul(T::one(), &weight, &cols, T::zero(), &mut out);
    for (mut row, &b) in out.outer_iter_mut().zip(bias) {
        row.mapv_inplace(|v| v + b);
    }
    (unflatten(out, n, ho, wo), cols)
}

/// Accumulates weight/bias gradients and returns the input gradient if asked.
pub(crate) fn conv_backward<T: Real>(
    dout: &Array4<T>,
    cols: &Array2<T>,
    weight: ArrayView2<'_, T>,
    in_dims: (usize, usize, usize, usize),
    g: ConvGeom,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Array4<T>> {
    let d2 = flatten(dout);
    let (cout, ckk) = weight.dim();
    {
        let mut dw = ndarray::ArrayViewMut2::from_shape((cout, ckk), dweight).expect("weight shape");
        general_mat_mul(T::one(), &d2, &cols.t(), T::one(), &mut dw);
    }
    for (db, row) in dbias.iter_mut().zip(d2.outer_iter()) {
        *db = *db + row.sum();
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = Array2::<T>::zeros(cols.dim());
    general_mat_mul(T::one(), &weight.t(), &d2, T::zero(), &mut dcols);
    Some(col2im(&dcols, in_dims, g))
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes gradient entries whose forward output was clamped.
pub(crate) fn relu_backward<T: Real>(dout: &mut Array4<T>, out: &Array4<T>) {
    ndarray::Zip::from(dout).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
}

pub(crate) fn upsample2x<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(a, b, y, xx)| x[[a, b, y / 2, xx / 2]])
}

pub(crate) fn upsample2x_backward<T: Real>(dout: &Array4<T>) -> Array4<T> {
    let (n, c, h2, w2) = dout.dim();
    let mut dx = Array4::<T>::zeros((n, c, h2 / 2, w2 / 2));
    for ((a, b, y, x), &v) in dout.indexed_iter() {
        let cell = &mut dx[[a, b, y / 2, x / 2]];
        *cell = *cell + v;
    }
    dx
}

/// Mixes each row with its partner: `alpha * x[i] + (1 - alpha) * x[partner[i]]`.
pub(crate) fn mix_rows<T: Real>(x: &Array4<T>, alpha: T, partner: &[usize]) -> Array4<T> {
    let mut out = x.clone();
    let beta = T::one() - alpha;
    for (i, &j) in partner.iter().enumerate() {
        let mut row = out.index_axis_mut(Axis(0), i);
        row.zip_mut_with(&x.index_axis(Axis(0), j), |a, &b| *a = alpha * *a + beta * b);
    }
    out
}

pub(crate) fn mix_rows_backward<T: Real>(dout: &Array4<T>, alpha: T, partner: &[usize]) -> Array4<T> {
    let mut dx = dout.mapv(|v| v * alpha);
    let beta = T::one() - alpha;
    for (i, &j) in partner.iter().enumerate() {
        let src = dout.index_axis(Axis(0), i).to_owned();
        dx.index_axis_mut(Axis(0), j)
            .zip_mut_with(&src, |a, &b| *a = *a + beta * b);
    }
    dx
}
