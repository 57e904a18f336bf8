//! Thin row-major wrappers over `matrixmultiply::dgemm`.

/// `c = a[m,k] · b[k,n]`, or `c += ...` when `accumulate`.
pub(crate) fn nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`.
pub(crate) fn nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

pub(crate) use nt as nt_acc;

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
pub(crate) fn tn(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    tn_beta(k, m, n, a, b, c, 1.0);
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`.
pub(crate) fn tn_into(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    tn_beta(k, m, n, a, b, c, 0.0);
}

fn tn_beta(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
