//! Dense matrix multiply kernels.
//!
//! With the default `system-blas` feature the products are dispatched to
//! the system OpenBLAS pinned to a single thread, which keeps reduction
//! order fixed and results bit-reproducible run to run. The pure-Rust
//! fallback kernel below is used when the feature is disabled.

#[cfg(feature = "system-blas")]
mod blas {
    use std::os::raw::{c_char, c_int};
    use std::sync::Once;

    // Fortran (column-major) BLAS entry points from libopenblas.
    extern "C" {
        fn sgemm_(
            transa: *const c_char,
            transb: *const c_char,
            m: *const c_int,
            n: *const c_int,
            k: *const c_int,
            alpha: *const f32,
            a: *const f32,
            lda: *const c_int,
            b: *const f32,
            ldb: *const c_int,
            beta: *const f32,
            c: *mut f32,
            ldc: *const c_int,
        );
        fn dgemm_(
            transa: *const c_char,
            transb: *const c_char,
            m: *const c_int,
            n: *const c_int,
            k: *const c_int,
            alpha: *const f64,
            a: *const f64,
            lda: *const c_int,
            b: *const f64,
            ldb: *const c_int,
            beta: *const f64,
            c: *mut f64,
            ldc: *const c_int,
        );
        fn openblas_set_num_threads(n: c_int);
    }

    static INIT: Once = Once::new();

    fn single_thread() {
        INIT.call_once(|| unsafe { openblas_set_num_threads(1) });
    }

    fn flag(t: bool) -> c_char {
        if t {
            b'T' as c_char
        } else {
            b'N' as c_char
        }
    }

    macro_rules! gemm_impl {
        ($name:ident, $ty:ty, $sym:ident) => {
            /// Row-major `c = op(a) @ op(b)` expressed through the
            /// column-major Fortran interface by computing
            /// `c^T = op(b)^T @ op(a)^T`.
            pub fn $name(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                a: &[$ty],
                b: &[$ty],
                c: &mut [$ty],
            ) {
                single_thread();
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.fill(0.0);
                    return;
                }
                let (mm, nn, kk) = (n as c_int, m as c_int, k as c_int);
                let lda = if trans_b { k as c_int } else { n as c_int };
                let ldb = if trans_a { m as c_int } else { k as c_int };
                let ldc = n as c_int;
                let alpha: $ty = 1.0;
                let beta: $ty = 0.0;
                unsafe {
                    $sym(
                        &flag(trans_b),
                        &flag(trans_a),
                        &mm,
                        &nn,
                        &kk,
                        &alpha,
                        b.as_ptr(),
                        &lda,
                        a.as_ptr(),
                        &ldb,
                        &beta,
                        c.as_mut_ptr(),
                        &ldc,
                    );
                }
            }
        };
    }

    gemm_impl!(sgemm, f32, sgemm_);
    gemm_impl!(dgemm, f64, dgemm_);
}

#[cfg(feature = "system-blas")]
pub use blas::{dgemm, sgemm};

#[cfg(not(feature = "system-blas"))]
mod fallback {
    macro_rules! gemm_impl {
        ($name:ident, $ty:ty) => {
            pub fn $name(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                a: &[$ty],
                b: &[$ty],
                c: &mut [$ty],
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                c.fill(0.0);
                // i-k-j loop order keeps the inner loop contiguous over c
                // and (for the common non-transposed case) over b.
                for i in 0..m {
                    for p in 0..k {
                        let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                        if av == 0.0 {
                            continue;
                        }
                        let crow = &mut c[i * n..(i + 1) * n];
                        if trans_b {
                            for j in 0..n {
                                crow[j] += av * b[j * k + p];
                            }
                        } else {
                            let brow = &b[p * n..(p + 1) * n];
                            for j in 0..n {
                                crow[j] += av * brow[j];
                            }
                        }
                    }
                }
            }
        };
    }

    gemm_impl!(sgemm, f32);
    gemm_impl!(dgemm, f64);
}

#[cfg(not(feature = "system-blas"))]
pub use fallback::{dgemm, sgemm};

#[cfg(test)]
mod tests {
    use super::*;

    /// Triple-loop reference used to validate whichever kernel is active.
    fn reference(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
    ) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                    let bv = if trans_b { b[j * k + p] } else { b[p * n + j] };
                    acc += av * bv;
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn dgemm_matches_reference_all_transpose_modes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.7 + 2.0).collect();
        for &ta in &[false, true] {
            for &tb in &[false, true] {
                // Layouts store op(a) as m x k logically, so the raw
                // buffers must be sized for the stored orientation.
                let a_store = if ta {
                    // stored as k x m
                    let mut s = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            s[p * m + i] = a[i * k + p];
                        }
                    }
                    s
                } else {
                    a.clone()
                };
                let b_store = if tb {
                    let mut s = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            s[j * k + p] = b[p * n + j];
                        }
                    }
                    s
                } else {
                    b.clone()
                };
                let mut c = vec![0.0; m * n];
                dgemm(ta, tb, m, k, n, &a_store, &b_store, &mut c);
                let want = reference(ta, tb, m, k, n, &a_store, &b_store);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12, "{x} vs {y} (ta={ta} tb={tb})");
                }
            }
        }
    }

    #[test]
    fn sgemm_identity() {
        let a = vec![1.0f32, 0.0, 0.0, 1.0];
        let b = vec![1.0f32, 2.0, 3.0, 4.0];
        let mut c = vec![0.0f32; 4];
        sgemm(false, false, 2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, b);
    }

    #[test]
    fn gemm_zero_inner_dim_zeroes_output() {
        let mut c = vec![7.0f64; 6];
        dgemm(false, false, 2, 0, 3, &[], &[], &mut c);
        assert!(c.iter().all(|&v| v == 0.0));
    }
}
