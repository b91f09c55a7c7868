//! Dense matrix kernels behind the tape ops.
//!
//! Plain loops arranged for autovectorization, with rayon over row blocks once
//! the work is large enough to amortize. All writes are disjoint per task, so
//! results are bitwise reproducible regardless of thread count.

use rayon::prelude::*;
use smv4d_core::scalar::Scalar;
use smv4d_core::tensor::Tensor;

/// Below this many multiply-adds the rayon dispatch costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 23;

fn as_matrix<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `a [m,k] * b [k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = as_matrix(a);
    let (kb, n) = as_matrix(b);
    assert_eq!(k, kb, "matmul inner dims: {k} vs {kb}");
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let run_rows = |rows: &mut [T], row0: usize| {
        for (ri, out_row) in rows.chunks_exact_mut(n).enumerate() {
            let i = row0 + ri;
            let a_row = &ad[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &bd[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += aik * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        let chunk_rows = (m / rayon::current_num_threads().max(1)).max(8);
        out.data_mut()
            .par_chunks_mut(chunk_rows * n)
            .enumerate()
            .for_each(|(ci, rows)| run_rows(rows, ci * chunk_rows));
    } else {
        run_rows(out.data_mut(), 0);
    }
    out
}

/// `a [m,k] * b^T` where `b` is `[n,k]` -> `[m,n]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = as_matrix(a);
    let (n, kb) = as_matrix(b);
    assert_eq!(k, kb, "matmul_nt inner dims: {k} vs {kb}");
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let run_rows = |rows: &mut [T], row0: usize| {
        for (ri, out_row) in rows.chunks_exact_mut(n).enumerate() {
            let i = row0 + ri;
            let a_row = &ad[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &bd[j * k..(j + 1) * k];
                let mut acc = [T::ZERO; 4];
                let mut ca = a_row.chunks_exact(4);
                let mut cb = b_row.chunks_exact(4);
                for (x, y) in ca.by_ref().zip(cb.by_ref()) {
                    acc[0] += x[0] * y[0];
                    acc[1] += x[1] * y[1];
                    acc[2] += x[2] * y[2];
                    acc[3] += x[3] * y[3];
                }
                let mut tail = T::ZERO;
                for (&x, &y) in ca.remainder().iter().zip(cb.remainder().iter()) {
                    tail += x * y;
                }
                *o = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        let chunk_rows = (m / rayon::current_num_threads().max(1)).max(8);
        out.data_mut()
            .par_chunks_mut(chunk_rows * n)
            .enumerate()
            .for_each(|(ci, rows)| run_rows(rows, ci * chunk_rows));
    } else {
        run_rows(out.data_mut(), 0);
    }
    out
}

/// `a^T * b` where `a` is `[m,k]`, `b` is `[m,n]` -> `[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = as_matrix(a);
    let (mb, n) = as_matrix(b);
    assert_eq!(m, mb, "matmul_tn outer dims: {m} vs {mb}");
    let mut out = Tensor::zeros(&[k, n]);
    let ad = a.data();
    let bd = b.data();
    // Sequential over m keeps accumulation order fixed; parallel over k rows
    // of the output would need a transposed walk of `a`, so split over m into
    // per-thread partials only when it pays off.
    if m * k * n >= PAR_THRESHOLD {
        let threads = rayon::current_num_threads().max(1);
        let chunk = m.div_ceil(threads);
        let partials: Vec<Vec<T>> = (0..threads)
            .into_par_iter()
            .map(|t| {
                let lo = (t * chunk).min(m);
                let hi = ((t + 1) * chunk).min(m);
                let mut acc = vec![T::ZERO; k * n];
                for i in lo..hi {
                    let a_row = &ad[i * k..(i + 1) * k];
                    let b_row = &bd[i * n..(i + 1) * n];
                    for (kk, &av) in a_row.iter().enumerate() {
                        let acc_row = &mut acc[kk * n..(kk + 1) * n];
                        for (o, &bv) in acc_row.iter_mut().zip(b_row.iter()) {
                            *o += av * bv;
                        }
                    }
                }
                acc
            })
            .collect();
        let od = out.data_mut();
        for part in partials {
            for (o, p) in od.iter_mut().zip(part.iter()) {
                *o += *p;
            }
        }
    } else {
        let od = out.data_mut();
        for i in 0..m {
            let a_row = &ad[i * k..(i + 1) * k];
            let b_row = &bd[i * n..(i + 1) * n];
            for (kk, &av) in a_row.iter().enumerate() {
                let acc_row = &mut od[kk * n..(kk + 1) * n];
                for (o, &bv) in acc_row.iter_mut().zip(b_row.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Column sums of `[m,n]` -> `[n]`.
pub fn column_sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = as_matrix(x);
    let mut out = Tensor::zeros(&[n]);
    let od = out.data_mut();
    let xd = x.data();
    for i in 0..m {
        for (o, &v) in od.iter_mut().zip(xd[i * n..(i + 1) * n].iter()) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use smv4d_core::rng::Prng;

    fn randn(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.rows(), a.cols());
        let n = b.cols();
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|kk| a.data()[i * k + kk] * b.data()[kk * n + j]).sum()
        })
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = Prng::new(1, "mm");
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (17, 9, 13), (64, 64, 64)] {
            let a = randn(&[m, k], &mut rng);
            let b = randn(&[k, n], &mut rng);
            let want = naive_matmul(&a, &b);
            assert!(matmul(&a, &b).max_abs_diff(&want) < 1e-12);

            let bt = Tensor::from_fn(&[n, k], |idx| b.data()[(idx % k) * n + idx / k]);
            assert!(matmul_nt(&a, &bt).max_abs_diff(&want) < 1e-12);

            let at = Tensor::from_fn(&[k, m], |idx| a.data()[(idx % m) * k + idx / m]);
            assert!(matmul_tn(&at, &b).max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn large_parallel_path_matches_naive() {
        let mut rng = Prng::new(2, "mm");
        let a = randn(&[96, 80], &mut rng);
        let b = randn(&[80, 72], &mut rng);
        let want = naive_matmul(&a, &b);
        assert!(matmul(&a, &b).max_abs_diff(&want) < 1e-11);
    }

    #[test]
    fn column_sum_matches() {
        let mut rng = Prng::new(3, "mm");
        let x = randn(&[7, 5], &mut rng);
        let got = column_sum(&x);
        for j in 0..5 {
            let want: f64 = (0..7).map(|i| x.data()[i * 5 + j]).sum();
            assert!((got.data()[j] - want).abs() < 1e-12);
        }
    }
}
