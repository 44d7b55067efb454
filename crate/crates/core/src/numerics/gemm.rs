//! Dense matrix products used by the tape.
//!
//! Deterministic mode runs a plain loop nest whose reduction order is fixed
//! and independent of every other output row. Fast mode hands the product to
//! `matrixmultiply`, which blocks the reduction differently.

/// Operand layout: `false` means the stored matrix is used as-is, `true`
/// means it is stored transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub transposed: bool,
}

/// `c[m, n] = op(a)[m, k] * op(b)[k, n]`, optionally accumulating into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_>,
    b: Operand<'_>,
    c: &mut [f64],
    accumulate: bool,
    deterministic: bool,
) {
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if !accumulate {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    if k == 0 {
        return;
    }
    if deterministic {
        naive(m, k, n, a, b, c);
    } else {
        // Strides in elements for row-major storage.
        let (rsa, csa) = if a.transposed { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if b.transposed { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: the slices were length-checked above and the strides
        // describe exactly those extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

fn naive(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, c: &mut [f64]) {
    if b.transposed {
        // Unpack b to [k, n] so the inner loop streams contiguously.
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b.data[j * k + p];
            }
        }
        let b = Operand {
            data: &bt,
            transposed: false,
        };
        return naive(m, k, n, a, b, c);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if a.transposed { a.data[p * m + i] } else { a.data[i * k + p] };
            let brow = &b.data[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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
    fn all_layouts_agree_in_both_modes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = reference(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for det in [true, false] {
            for (ad, ta) in [(&a, false), (&at, true)] {
                for (bd, tb) in [(&b, false), (&bt, true)] {
                    let mut c = vec![0.0; m * n];
                    gemm(
                        m,
                        k,
                        n,
                        Operand { data: ad, transposed: ta },
                        Operand { data: bd, transposed: tb },
                        &mut c,
                        false,
                        det,
                    );
                    for (x, y) in c.iter().zip(&want) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
