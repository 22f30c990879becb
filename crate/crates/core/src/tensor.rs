//! Flat row-major f64 tensors plus the matrix products the classifier needs.
//!
//! Matrix multiplication delegates to `matrixmultiply::dgemm` (single-threaded,
//! fixed blocking) and parallelizes by splitting output rows into disjoint
//! chunks, so results are bit-identical regardless of thread scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Dense tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

struct SendConstPtr(*const f64);
unsafe impl Send for SendConstPtr {}
unsafe impl Sync for SendConstPtr {}

/// `c[m,n] = alpha * op(a) · op(b) + beta * c`.
///
/// `a` holds `[m,k]` row-major, or `[k,m]` when `a_trans`; `b` holds `[k,n]`,
/// or `[n,k]` when `b_trans`. Transposition is expressed through strides, so
/// no operand is copied.
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "out length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1isize, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1isize, k as isize) } else { (n as isize, 1) };

    let threads = rayon::current_num_threads().max(1);
    let rows_per = m.div_ceil(threads);
    let a_ptr = SendConstPtr(a.as_ptr());
    let b_ptr = SendConstPtr(b.as_ptr());

    c.par_chunks_mut(rows_per * n).enumerate().for_each(|(ci, c_chunk)| {
        let row0 = ci * rows_per;
        let rows = c_chunk.len() / n;
        let a_ptr = &a_ptr;
        let b_ptr = &b_ptr;
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                alpha,
                a_ptr.0.offset(row0 as isize * rsa),
                rsa,
                csa,
                b_ptr.0,
                rsb,
                csb,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) -> Vec<f64> {
        let at = |i: usize, l: usize| if a_t { a[l * m + i] } else { a[i * k + l] };
        let bt = |l: usize, j: usize| if b_t { b[j * k + l] } else { b[l * n + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += at(i, l) * bt(l, j);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_all_layouts() {
        let mut rng = crate::rng::substream(2, "gemm", 0);
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (7, 1, 2), (16, 33, 9), (1, 8, 1)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for &(a_t, b_t) in &[(false, false), (true, false), (false, true), (true, true)] {
                // reorder storage to match the transposed layout
                let a_store = if a_t {
                    let mut t = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            t[l * m + i] = a[i * k + l];
                        }
                    }
                    t
                } else {
                    a.clone()
                };
                let b_store = if b_t {
                    let mut t = vec![0.0; k * n];
                    for l in 0..k {
                        for j in 0..n {
                            t[j * k + l] = b[l * n + j];
                        }
                    }
                    t
                } else {
                    b.clone()
                };
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, 1.0, &a_store, a_t, &b_store, b_t, 0.0, &mut c);
                let want = naive(m, k, n, &a_store, a_t, &b_store, b_t);
                for (x, y) in c.iter().zip(want.iter()) {
                    assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 4.0];
        let mut c = vec![10.0];
        gemm(1, 2, 1, 1.0, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c[0], 10.0 + 11.0);
    }

    #[test]
    fn gemm_deterministic_across_runs() {
        let mut rng = crate::rng::substream(2, "gemm-det", 0);
        let (m, k, n) = (130, 257, 63);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c1);
        gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn tensor_basics() {
        let t = Tensor::zeros(&[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(t.all_finite());
        let u = Tensor::from_vec(&[2], vec![1.0, f64::NAN]);
        assert!(!u.all_finite());
    }
}
