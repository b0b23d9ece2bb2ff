//! Single-precision GEMM.
//!
//! Every output element accumulates its dot product in ascending `k` order
//! starting from zero, then applies `alpha`/`beta`. Vectorisation runs across
//! output columns and threading across output rows, so neither changes the
//! per-element summation order: results are bit-identical to a serial triple
//! loop for any thread count.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

const MR: usize = 4;
const NB: usize = 64;
const PAR_THRESHOLD: usize = 1 << 20;

/// `c ← alpha·op(a)·op(b) + beta·c` on row-major slices.
///
/// `op(a)` is `m×k`, `op(b)` is `k×n`, `c` is `m×n`. When `trans_a` is set `a`
/// is stored `k×m`; likewise `b` is stored `n×k` under `trans_b`. With
/// `beta == 0` the previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    trans_a: Transpose,
    trans_b: Transpose,
    m: usize,
    n: usize,
    k: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) -> Result<()> {
    if a.len() != m * k || b.len() != k * n || c.len() != m * n {
        return Err(Error::shape(format!(
            "gemm operand sizes a={} b={} c={} do not match m={m} n={n} k={k}",
            a.len(),
            b.len(),
            c.len()
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if alpha == 0.0 || k == 0 {
        scale_c(c, beta);
        return Ok(());
    }

    let b_rows: std::borrow::Cow<[f32]> = match trans_b {
        Transpose::No => b.into(),
        Transpose::Yes => transpose(b, n, k).into(),
    };
    let packed_a = pack_a(a, trans_a, m, k);

    let rows_per_task = if m * n * k >= PAR_THRESHOLD { MR * 4 } else { m.next_multiple_of(MR) };
    let chunk = rows_per_task * n;
    let work = |(t, c_rows): (usize, &mut [f32])| {
        let row0 = t * rows_per_task;
        let rows = c_rows.len() / n;
        for j0 in (0..n).step_by(NB) {
            let nb = NB.min(n - j0);
            for r0 in (0..rows).step_by(MR) {
                let mr = MR.min(rows - r0);
                let block = (row0 + r0) / MR;
                let pa = &packed_a[block * MR * k..(block + 1) * MR * k];
                kernel(pa, &b_rows, n, k, j0, nb, mr, alpha, beta, &mut c_rows[r0 * n..]);
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(chunk).enumerate().for_each(work);
    } else {
        c.chunks_mut(chunk).enumerate().for_each(work);
    }
    Ok(())
}

fn scale_c(c: &mut [f32], beta: f32) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
}

fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for (col, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            out[col * rows + r] = v;
        }
    }
    out
}

/// Packs op(a) into blocks of `MR` rows laid out `[block][p][r]`, zero padded.
fn pack_a(a: &[f32], trans: Transpose, m: usize, k: usize) -> Vec<f32> {
    let blocks = m.div_ceil(MR);
    let mut packed = vec![0.0; blocks * MR * k];
    for i in 0..m {
        let (block, r) = (i / MR, i % MR);
        let base = block * MR * k;
        for p in 0..k {
            let v = match trans {
                Transpose::No => a[i * k + p],
                Transpose::Yes => a[p * m + i],
            };
            packed[base + p * MR + r] = v;
        }
    }
    packed
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn kernel(
    pa: &[f32],
    b: &[f32],
    n: usize,
    k: usize,
    j0: usize,
    nb: usize,
    mr: usize,
    alpha: f32,
    beta: f32,
    c: &mut [f32],
) {
    let mut acc = [[0.0f32; NB]; MR];
    if nb == NB {
        for p in 0..k {
            let brow: &[f32; NB] = b[p * n + j0..p * n + j0 + NB].try_into().unwrap();
            let ap = &pa[p * MR..p * MR + MR];
            for r in 0..MR {
                let av = ap[r];
                let row = &mut acc[r];
                for jj in 0..NB {
                    row[jj] += av * brow[jj];
                }
            }
        }
    } else {
        for p in 0..k {
            let brow = &b[p * n + j0..p * n + j0 + nb];
            let ap = &pa[p * MR..p * MR + MR];
            for r in 0..MR {
                let av = ap[r];
                for (acc_v, &bv) in acc[r][..nb].iter_mut().zip(brow) {
                    *acc_v += av * bv;
                }
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate().take(mr) {
        let out = &mut c[r * n + j0..r * n + j0 + nb];
        if beta == 0.0 {
            for (o, &s) in out.iter_mut().zip(&acc_row[..nb]) {
                *o = alpha * s;
            }
        } else {
            for (o, &s) in out.iter_mut().zip(&acc_row[..nb]) {
                *o = alpha * s + beta * *o;
            }
        }
    }
}

/// Tensor-level GEMM on rank-2 operands: `c ← alpha·op(a)·op(b) + beta·c`.
pub fn gemm(
    a: &Tensor,
    b: &Tensor,
    trans_a: Transpose,
    trans_b: Transpose,
    alpha: f32,
    beta: f32,
    c: &mut Tensor,
) -> Result<()> {
    let dims2 = |t: &Tensor, what: &str| -> Result<(usize, usize)> {
        match t.dims() {
            &[r, c] => Ok((r, c)),
            d => Err(Error::shape(format!("gemm operand {what} must be a matrix, got {d:?}"))),
        }
    };
    let (ar, ac) = dims2(a, "a")?;
    let (br, bc) = dims2(b, "b")?;
    let (cr, cc) = dims2(c, "c")?;
    let (m, ka) = if trans_a == Transpose::Yes { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b == Transpose::Yes { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(Error::shape(format!("gemm inner dimensions disagree: {ka} vs {kb}")));
    }
    if (cr, cc) != (m, n) {
        return Err(Error::shape(format!("gemm output is {cr}x{cc}, expected {m}x{n}")));
    }
    sgemm(trans_a, trans_b, m, n, ka, alpha, a.data(), b.data(), beta, c.data_mut())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Reference triple loop; same per-element accumulation order.
    #[allow(clippy::too_many_arguments)]
    fn naive(
        ta: Transpose,
        tb: Transpose,
        m: usize,
        n: usize,
        k: usize,
        alpha: f32,
        a: &[f32],
        b: &[f32],
        beta: f32,
        c: &mut [f32],
    ) {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    let av = if ta == Transpose::Yes { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb == Transpose::Yes { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = if beta == 0.0 { alpha * s } else { alpha * s + beta * c[i * n + j] };
            }
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn identity_times_b() {
        let i3 = Tensor::from_dims(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = Tensor::from_dims(&[3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let mut c = Tensor::from_dims(&[3, 2], vec![9.0; 6]);
        gemm(&i3, &b, Transpose::No, Transpose::No, 1.0, 0.0, &mut c).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::from_dims(&[2, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::from_dims(&[2, 1], vec![5., 6.]);
        let mut c = Tensor::from_dims(&[2, 1], vec![0.0; 2]);
        gemm(&a, &b, Transpose::No, Transpose::No, 1.0, 0.0, &mut c).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn alpha_zero_beta_one_leaves_c() {
        let a = Tensor::from_dims(&[2, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::from_dims(&[2, 2], vec![5., 6., 7., 8.]);
        let mut c = Tensor::from_dims(&[2, 2], vec![0.5, -1.5, 2.25, 3.0]);
        let before = c.clone();
        gemm(&a, &b, Transpose::No, Transpose::No, 0.0, 1.0, &mut c).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Tensor::from_dims(&[2, 3], vec![0.0; 6]);
        let b = Tensor::from_dims(&[2, 2], vec![0.0; 4]);
        let mut c = Tensor::from_dims(&[2, 2], vec![0.0; 4]);
        assert!(matches!(
            gemm(&a, &b, Transpose::No, Transpose::No, 1.0, 0.0, &mut c),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matches_naive_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let m = rng.random_range(1..=64);
            let n = rng.random_range(1..=64);
            let k = rng.random_range(1..=64);
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let c0 = rand_vec(&mut rng, m * n);
            for ta in [Transpose::No, Transpose::Yes] {
                for tb in [Transpose::No, Transpose::Yes] {
                    let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
                    let mut got = c0.clone();
                    let mut want = c0.clone();
                    sgemm(ta, tb, m, n, k, alpha, &a, &b, beta, &mut got).unwrap();
                    naive(ta, tb, m, n, k, alpha, &a, &b, beta, &mut want);
                    for (g, w) in got.iter().zip(&want) {
                        assert!((g - w).abs() <= 1e-6, "{g} vs {w}");
                    }
                }
            }
        }
    }

    #[test]
    fn large_parallel_path_is_bit_identical_to_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, n, k) = (70, 130, 150);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut got = vec![0.0; m * n];
        let mut want = vec![0.0; m * n];
        sgemm(Transpose::No, Transpose::No, m, n, k, 1.0, &a, &b, 0.0, &mut got).unwrap();
        naive(Transpose::No, Transpose::No, m, n, k, 1.0, &a, &b, 0.0, &mut want);
        assert_eq!(got, want);
    }
}
