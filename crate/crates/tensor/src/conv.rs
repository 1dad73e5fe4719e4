//! Raw convolution kernels shared by the tape ops.
//!
//! Layout conventions (row-major throughout):
//! - images are `[H, W, C]` with the channel index fastest;
//! - `conv2d` kernels are `[k, k, Cin, Cout]`;
//! - `conv_transpose2d` kernels are `[k, k, Cout, Cin]`, so that the
//!   transposed convolution is exactly the adjoint of `conv2d` with the
//!   same kernel tensor.
//!
//! Both directions are lowered to GEMM with an im2col patch matrix whose
//! columns are ordered `(ki, kj, c)` with `c` fastest — the same order a
//! flattened kernel tensor has.

use crate::Scalar;

/// Output spatial size of a valid convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution before any cropping.
pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - 1) * stride + kernel
}

/// Gather `[oh*ow, k*k*c]` patches from `img` `[h, w, c]`.
pub fn im2col<T: Scalar>(img: &[T], h: usize, w: usize, c: usize, k: usize, stride: usize, out: &mut [T]) {
    let oh = conv_out_size(h, k, stride);
    let ow = conv_out_size(w, k, stride);
    debug_assert_eq!(img.len(), h * w * c);
    debug_assert_eq!(out.len(), oh * ow * k * k * c);
    let patch = k * k * c;
    for py in 0..oh {
        for px in 0..ow {
            let row = (py * ow + px) * patch;
            let iy0 = py * stride;
            let ix0 = px * stride;
            for ki in 0..k {
                let src = ((iy0 + ki) * w + ix0) * c;
                let dst = row + ki * k * c;
                out[dst..dst + k * c].copy_from_slice(&img[src..src + k * c]);
            }
        }
    }
}

/// Scatter-add `[ph*pw, k*k*c]` patches back into `img` `[h, w, c]`; the
/// adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, k: usize, stride: usize, img: &mut [T]) {
    let ph = conv_out_size(h, k, stride);
    let pw = conv_out_size(w, k, stride);
    debug_assert_eq!(cols.len(), ph * pw * k * k * c);
    debug_assert_eq!(img.len(), h * w * c);
    let patch = k * k * c;
    for py in 0..ph {
        for px in 0..pw {
            let row = (py * pw + px) * patch;
            let iy0 = py * stride;
            let ix0 = px * stride;
            for ki in 0..k {
                let dst = ((iy0 + ki) * w + ix0) * c;
                let src = row + ki * k * c;
                for off in 0..k * c {
                    img[dst + off] += cols[src + off];
                }
            }
        }
    }
}

/// conv2d forward: `input [h,w,cin]`, `kernels [k,k,cin,cout]` -> `[oh,ow,cout]`.
pub fn conv2d_forward<T: Scalar>(
    input: &[T], h: usize, w: usize, cin: usize,
    kernels: &[T], k: usize, cout: usize, stride: usize,
) -> Vec<T> {
    let oh = conv_out_size(h, k, stride);
    let ow = conv_out_size(w, k, stride);
    let p = oh * ow;
    let patch = k * k * cin;
    let mut cols = vec![T::zero(); p * patch];
    im2col(input, h, w, cin, k, stride, &mut cols);
    let mut out = vec![T::zero(); p * cout];
    T::gemm(p, patch, cout, &cols, kernels, &mut out);
    out
}

/// Gradients of conv2d w.r.t. input and kernels given upstream `d_out [oh,ow,cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T], h: usize, w: usize, cin: usize,
    kernels: &[T], k: usize, cout: usize, stride: usize,
    d_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let oh = conv_out_size(h, k, stride);
    let ow = conv_out_size(w, k, stride);
    let p = oh * ow;
    let patch = k * k * cin;

    // The patch matrix is recomputed here rather than cached at forward
    // time; it is the largest buffer in the graph by an order of magnitude.
    let mut cols = vec![T::zero(); p * patch];
    im2col(input, h, w, cin, k, stride, &mut cols);

    let mut d_kernels = vec![T::zero(); patch * cout];
    T::gemm_tn(patch, p, cout, &cols, d_out, &mut d_kernels);

    let mut d_cols = vec![T::zero(); p * patch];
    T::gemm_nt(p, cout, patch, d_out, kernels, &mut d_cols);
    let mut d_input = vec![T::zero(); h * w * cin];
    col2im(&d_cols, h, w, cin, k, stride, &mut d_input);

    (d_input, d_kernels)
}

/// conv_transpose2d forward: `input [h,w,cin]`, `kernels [k,k,cout,cin]`
/// -> `[(h-1)s+k, (w-1)s+k, cout]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    input: &[T], h: usize, w: usize, cin: usize,
    kernels: &[T], k: usize, cout: usize, stride: usize,
) -> Vec<T> {
    let oh = conv_transpose_out_size(h, k, stride);
    let ow = conv_transpose_out_size(w, k, stride);
    let p = h * w;
    let patch = k * k * cout;
    // cols[p, (ki,kj,cout)] = sum_cin input[p, cin] * kernels[(ki,kj,cout), cin]
    let mut cols = vec![T::zero(); p * patch];
    T::gemm_nt(p, cin, patch, input, kernels, &mut cols);
    let mut out = vec![T::zero(); oh * ow * cout];
    col2im(&cols, oh, ow, cout, k, stride, &mut out);
    out
}

/// Gradients of conv_transpose2d given upstream `d_out [(h-1)s+k, (w-1)s+k, cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &[T], h: usize, w: usize, cin: usize,
    kernels: &[T], k: usize, cout: usize, stride: usize,
    d_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let oh = conv_transpose_out_size(h, k, stride);
    let ow = conv_transpose_out_size(w, k, stride);
    let p = h * w;
    let patch = k * k * cout;

    let mut d_cols = vec![T::zero(); p * patch];
    im2col(d_out, oh, ow, cout, k, stride, &mut d_cols);

    // d_input = im2col(d_out) * kernels  (adjoint pair of the forward GEMM)
    let mut d_input = vec![T::zero(); p * cin];
    T::gemm(p, patch, cin, &d_cols, kernels, &mut d_input);

    // d_kernels = im2col(d_out)^T * input
    let mut d_kernels = vec![T::zero(); patch * cin];
    T::gemm_tn(patch, p, cin, &d_cols, input, &mut d_kernels);

    (d_input, d_kernels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish small data.
        let (h, w, c, k, s) = (5, 6, 2, 3, 2);
        let oh = conv_out_size(h, k, s);
        let ow = conv_out_size(w, k, s);
        let x: Vec<f64> = (0..h * w * c).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..oh * ow * k * k * c).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, h, w, c, k, s, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, h, w, c, k, s, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn shape_formulas() {
        assert_eq!(conv_out_size(128, 9, 1), 120);
        assert_eq!(conv_out_size(28, 9, 2), 10);
        assert_eq!(conv_transpose_out_size(8, 4, 2), 18);
    }
}
