//! Dense matrix kernels shared by the forward and backward passes.
//!
//! The innermost loop always streams rows of the right-hand operand, and
//! `mm_nn` processes output rows in small blocks so each B row is reused
//! across the block instead of being re-streamed per output row. Per output
//! element the accumulation order over the inner dimension is fixed
//! (ascending), so results are bit-identical regardless of blocking.

use super::Real;

const ROW_BLOCK: usize = 16;

/// `C += A * B` for row-major `A [m,k]`, `B [k,n]`, `C [m,n]`.
pub fn mm_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut ib = 0;
    while ib < m {
        let ie = (ib + ROW_BLOCK).min(m);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in ib..ie {
                let av = a[i * k + p];
                if av == F::ZERO {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
        ib = ie;
    }
}

/// `C += A * B^T` for row-major `A [m,k]`, `B [n,k]`, `C [m,n]`.
pub fn mm_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::ZERO;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// `C += A^T * B` for row-major `A [k,m]`, `B [k,n]`, `C [m,n]`.
pub fn mm_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == F::ZERO {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn variants_agree_with_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, k, n) = (4, 6, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let want = reference(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c, m, k, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // A * B == A * (B^T)^T
        let mut bt = vec![0.0; k * n];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c2, m, k, n);
        assert!(c2.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // A * B == (A^T)^T * B
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c3, k, m, n);
        assert!(c3.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
