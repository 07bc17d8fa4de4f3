/// `c = op(a) * op(b) (+ c)` for row-major operands.
///
/// `a` is logically `m x k` (stored `k x m` when `trans_a`), `b` is logically
/// `k x n` (stored `n x k` when `trans_b`), and `c` is `m x n`. Each output
/// element is accumulated in a fixed order that does not depend on `m`, so a
/// row of the product is bitwise independent of the other rows in the batch.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Textbook triple loop, kept as an independent reference for tests.
pub fn matmul_naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn matches_triple_loop_with_every_transpose_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (7, 5, 3);
        let a = random(&mut rng, m * k);
        let b = random(&mut rng, k * n);
        let want = matmul_naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let lhs = if ta { &at } else { &a };
            let rhs = if tb { &bt } else { &b };
            gemm(m, k, n, lhs, ta, rhs, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_do_not_depend_on_batch_height() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k, n) = (67, 33);
        let b = random(&mut rng, k * n);
        let tall = random(&mut rng, 37 * k);
        let mut c_tall = vec![0.0; 37 * n];
        gemm(37, k, n, &tall, false, &b, false, &mut c_tall, false);
        for r in [0, 5, 36] {
            let mut c_row = vec![0.0; n];
            gemm(1, k, n, &tall[r * k..(r + 1) * k], false, &b, false, &mut c_row, false);
            assert_eq!(&c_tall[r * n..(r + 1) * n], c_row.as_slice());
        }
    }

    #[test]
    fn accumulate_adds_into_output() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = vec![1.0, 1.0];
        gemm(2, 2, 1, &a, false, &b, false, &mut c, true);
        assert_eq!(c, vec![18.0, 40.0]);
    }
}
