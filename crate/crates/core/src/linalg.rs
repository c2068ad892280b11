//! Small dense LU factorization with partial pivoting.
//!
//! The interior-point iterations refactor a KKT matrix of a few dozen rows
//! every step. This keeps one row-major buffer around and factors it in place,
//! so the hot loop does not allocate.

/// Row-major LU factorization `P·A = L·U`, unit lower triangle stored below the diagonal.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

/// Returned when a pivot falls below the singularity threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularMatrix {
    pub column: usize,
}

impl DenseLu {
    pub fn with_dim(n: usize) -> Self {
        Self {
            n,
            lu: vec![0.0; n * n],
            perm: (0..n).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Mutable access to the row-major matrix to be factored.
    pub fn matrix_mut(&mut self) -> &mut [f64] {
        &mut self.lu
    }

    /// Factors the buffer in place. A pivot is rejected when its magnitude is
    /// `<= rel_tol * max|a_ij|` (and always when it is zero or non-finite).
    pub fn factor(&mut self, rel_tol: f64) -> Result<(), SingularMatrix> {
        let n = self.n;
        let a = &mut self.lu;
        let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let threshold = rel_tol * scale;
        for (i, p) in self.perm.iter_mut().enumerate() {
            *p = i;
        }
        for k in 0..n {
            let mut pivot_row = k;
            let mut pivot_abs = a[k * n + k].abs();
            for r in (k + 1)..n {
                let v = a[r * n + k].abs();
                if v > pivot_abs {
                    pivot_abs = v;
                    pivot_row = r;
                }
            }
            if !(pivot_abs > threshold) || pivot_abs == 0.0 || !pivot_abs.is_finite() {
                return Err(SingularMatrix { column: k });
            }
            if pivot_row != k {
                for c in 0..n {
                    a.swap(k * n + c, pivot_row * n + c);
                }
                self.perm.swap(k, pivot_row);
            }
            let pivot = a[k * n + k];
            for r in (k + 1)..n {
                let factor = a[r * n + k] / pivot;
                if factor == 0.0 {
                    continue;
                }
                a[r * n + k] = factor;
                let (upper, lower) = a.split_at_mut(r * n);
                let pivot_row = &upper[k * n + k + 1..k * n + n];
                let row = &mut lower[k + 1..n];
                for (x, &u) in row.iter_mut().zip(pivot_row) {
                    *x -= factor * u;
                }
            }
        }
        Ok(())
    }

    /// Solves `A·x = rhs` using the current factorization, writing `x` into `out`.
    pub fn solve_into(&self, rhs: &[f64], out: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(rhs.len(), n);
        debug_assert_eq!(out.len(), n);
        let a = &self.lu;
        for (i, o) in out.iter_mut().enumerate() {
            *o = rhs[self.perm[i]];
        }
        for i in 0..n {
            let row = &a[i * n..i * n + i];
            let s: f64 = row.iter().zip(&out[..i]).map(|(l, x)| l * x).sum();
            out[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &a[i * n + i + 1..i * n + n];
            let s: f64 = row.iter().zip(&out[i + 1..]).map(|(u, x)| u * x).sum();
            out[i] = (out[i] - s) / a[i * n + i];
        }
    }
}
