//! Dense inner loops shared by the tape ops.
//!
//! Every accumulation runs in ascending index order over the reduced axis,
//! so a given input always produces the same bits.

use crate::tensor::Real;

/// `c[m×r] += a[m×k] · b[k×r]`, all row-major and contiguous.
///
/// Each output element accumulates its `k` products in ascending `p`.
#[inline]
pub(crate) fn gemm_acc<F: Real>(m: usize, k: usize, r: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * r && c.len() >= m * r);
    for i in 0..m {
        let crow = &mut c[i * r..(i + 1) * r];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * r..(p + 1) * r];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// Transposes a row-major `rows×cols` matrix into `out` (`cols×rows`).
pub(crate) fn transpose2<F: Copy>(rows: usize, cols: usize, src: &[F], out: &mut [F]) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Numerically stable softmax of every contiguous row of length `k`.
pub(crate) fn softmax_rows<F: Real>(k: usize, x: &[F], out: &mut [F]) {
    for (xr, yr) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let mut mx = F::neg_infinity();
        for &v in xr {
            mx = mx.max(v);
        }
        let mut total = F::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            let e = (v - mx).exp();
            *y = e;
            total += e;
        }
        let inv = F::one() / total;
        for y in yr.iter_mut() {
            *y *= inv;
        }
    }
}

/// `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub(crate) fn softmax_rows_backward<F: Real>(k: usize, y: &[F], dy: &[F], dx: &mut [F]) {
    for ((yr, gr), xr) in y
        .chunks_exact(k)
        .zip(dy.chunks_exact(k))
        .zip(dx.chunks_exact_mut(k))
    {
        let mut s = F::zero();
        for (&a, &b) in yr.iter().zip(gr) {
            s += a * b;
        }
        for ((x, &a), &b) in xr.iter_mut().zip(yr).zip(gr) {
            *x += a * (b - s);
        }
    }
}
