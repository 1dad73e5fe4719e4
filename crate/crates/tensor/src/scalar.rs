use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Real scalar the tensor stack is generic over. Training code uses `f32`
/// (matching the 32-bit storage of the input data), gradient checks use
/// `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// C := alpha * op(A) * op(B) + beta * C with explicit element strides,
    /// sizes after transposition: op(A) is m x k, op(B) is k x n, C is m x n
    /// row-major contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// C := A(m,k) * B(k,n), all row-major contiguous.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), m * k, "gemm: A size");
        assert_eq!(b.len(), k * n, "gemm: B size");
        Self::gemm_strided(m, k, n, Self::one(), a, k as isize, 1, b, n as isize, 1, Self::zero(), c);
    }

    /// C := A^T * B where A is stored row-major (k,m).
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), k * m, "gemm_tn: A size");
        assert_eq!(b.len(), k * n, "gemm_tn: B size");
        Self::gemm_strided(m, k, n, Self::one(), a, 1, m as isize, b, n as isize, 1, Self::zero(), c);
    }

    /// C := A * B^T where B is stored row-major (n,k).
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        assert_eq!(a.len(), m * k, "gemm_nt: A size");
        assert_eq!(b.len(), n * k, "gemm_nt: B size");
        Self::gemm_strided(m, k, n, Self::one(), a, k as isize, 1, b, 1, k as isize, Self::zero(), c);
    }

    fn from_f64x(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn to_f64x(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        assert_eq!(c.len(), m * n, "gemm: C size");
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        assert_eq!(c.len(), m * n, "gemm: C size");
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 - i as f64 * 0.25).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, &a, &b, &mut c);
        assert_eq!(c, expect);

        // A^T path: store A as (k,m) and transpose back.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        f64::gemm_tn(m, k, n, &at, &b, &mut c2);
        assert_eq!(c2, expect);

        // B^T path: store B as (n,k).
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        f64::gemm_nt(m, k, n, &a, &bt, &mut c3);
        assert_eq!(c3, expect);
    }
}
