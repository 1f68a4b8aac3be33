//! Plain matrix kernels. All matrices are row-major and contiguous.

use crate::scalar::Scalar;

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cij, &bpj) in ci.iter_mut().zip(bp) {
                *cij = *cij + aip * bpj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let bj = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ai.iter().zip(bj) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let ap = &a[p * m..(p + 1) * m];
        let bp = &b[p * n..(p + 1) * n];
        for (i, &api) in ap.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (cij, &bpj) in ci.iter_mut().zip(bp) {
                *cij = *cij + api * bpj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_layouts_agree_with_triple_loop() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&mut c, &a, &b, m, k, n);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        gemm_nt(&mut c, &a, &transpose(&b, k, n), m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut c = vec![0.0; m * n];
        gemm_tn(&mut c, &transpose(&a, m, k), &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
