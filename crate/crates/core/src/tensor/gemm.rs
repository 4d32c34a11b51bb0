//! Dense products on row-major buffers. Every output element accumulates
//! over the shared dimension in ascending order.

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut rows = c[..m * n].chunks_exact_mut(n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, c1, c2, c3) = (
            rows.next().expect("row"),
            rows.next().expect("row"),
            rows.next().expect("row"),
            rows.next().expect("row"),
        );
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for row in rows {
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
        i += 1;
    }
}

/// `c[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    let mut rows = c[..k * n].chunks_exact_mut(n);
    let mut p = 0;
    while p + 4 <= k {
        let (c0, c1, c2, c3) = (
            rows.next().expect("row"),
            rows.next().expect("row"),
            rows.next().expect("row"),
            rows.next().expect("row"),
        );
        for i in 0..m {
            let (a0, a1, a2, a3) = (a[i * k + p], a[i * k + p + 1], a[i * k + p + 2], a[i * k + p + 3]);
            let br = &b[i * n..(i + 1) * n];
            for j in 0..n {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        p += 4;
    }
    for row in rows {
        for i in 0..m {
            let av = a[i * k + p];
            for (cv, &bv) in row.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *cv += av * bv;
            }
        }
        p += 1;
    }
}

/// Four-lane dot product.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m×k] += a · bᵀ` for `a[m×n]`, `b[k×n]`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(ar, &b[p * n..(p + 1) * n]);
        }
    }
}
