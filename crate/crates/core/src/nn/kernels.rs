//! Dense-layer kernels.
//!
//! Inputs to the first layer are multi-hot code vectors, so the forward
//! product and the weight gradient skip zero entries when the batch is
//! sparse enough. Dense batches go through `ndarray`'s matrix multiply.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

/// Density below which the row-sparse path is used.
const SPARSE_DENSITY: f64 = 0.25;

pub(crate) fn is_sparse(x: &ArrayView2<f64>) -> bool {
    let n = x.len();
    if n == 0 {
        return false;
    }
    let nnz = x.iter().filter(|v| **v != 0.0).count();
    (nnz as f64) < SPARSE_DENSITY * n as f64
}

/// `x · w + b` with `w` shaped `(in, out)`.
pub(crate) fn affine(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &[f64], sparse: bool) -> Array2<f64> {
    let rows = x.nrows();
    let out = w.ncols();
    let mut z = Array2::<f64>::zeros((rows, out));
    for mut row in z.rows_mut() {
        row.as_slice_mut().expect("standard layout").copy_from_slice(b);
    }
    if sparse {
        let w = w.as_standard_layout();
        let ws = w.as_slice().expect("standard layout");
        for (xr, mut zr) in x.rows().into_iter().zip(z.rows_mut()) {
            let zs = zr.as_slice_mut().expect("standard layout");
            for (j, &v) in xr.iter().enumerate() {
                if v != 0.0 {
                    axpy(v, &ws[j * out..(j + 1) * out], zs);
                }
            }
        }
    } else {
        general_mat_mul(1.0, x, w, 1.0, &mut z);
    }
    z
}

/// Accumulates `xᵀ · dz` into `dw` (shape `(in, out)`), overwriting it.
pub(crate) fn weight_grad(x: &ArrayView2<f64>, dz: &ArrayView2<f64>, dw: &mut ArrayViewMut2<f64>, sparse: bool) {
    if sparse && dw.is_standard_layout() {
        dw.fill(0.0);
        let out = dz.ncols();
        let dz = dz.as_standard_layout();
        let dws = dw.as_slice_mut().expect("standard layout");
        for (xr, dzr) in x.rows().into_iter().zip(dz.rows()) {
            let dzs = dzr.to_slice().expect("standard layout");
            for (j, &v) in xr.iter().enumerate() {
                if v != 0.0 {
                    axpy(v, dzs, &mut dws[j * out..(j + 1) * out]);
                }
            }
        }
    } else {
        general_mat_mul(1.0, &x.t(), dz, 0.0, dw);
    }
}

pub(crate) fn column_sums(dz: &ArrayView2<f64>) -> Vec<f64> {
    dz.sum_axis(Axis(0)).to_vec()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, ShapeBuilder};

    #[test]
    fn weight_grad_accepts_column_major_upstream() {
        let x = array![[0.0, 1.0, 0.0], [2.0, 0.0, 0.0]];
        let dz = array![[1.0, 2.0], [3.0, 4.0]];
        let mut dz_f = Array2::zeros((2, 2).f());
        dz_f.assign(&dz);
        assert!(!dz_f.is_standard_layout());
        let mut a = Array2::zeros((3, 2));
        let mut b = Array2::zeros((3, 2));
        weight_grad(&x.view(), &dz.view(), &mut a.view_mut(), true);
        weight_grad(&x.view(), &dz_f.view(), &mut b.view_mut(), true);
        assert_eq!(a, b);
    }

    #[test]
    fn sparse_and_dense_paths_agree() {
        let x = array![[0.0, 1.0, 0.0], [2.0, 0.0, 0.0]];
        let w = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = [0.5, -0.5];
        let dense = affine(&x.view(), &w.view(), &b, false);
        let sparse = affine(&x.view(), &w.view(), &b, true);
        assert_eq!(dense, sparse);
        assert_eq!(dense, array![[3.5, 3.5], [2.5, 3.5]]);

        let dz = array![[1.0, -1.0], [0.5, 2.0]];
        let mut a = Array2::zeros((3, 2));
        let mut c = Array2::zeros((3, 2));
        weight_grad(&x.view(), &dz.view(), &mut a.view_mut(), false);
        weight_grad(&x.view(), &dz.view(), &mut c.view_mut(), true);
        assert_eq!(a, c);
    }
}
