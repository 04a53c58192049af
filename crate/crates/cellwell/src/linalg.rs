//! Small dense-band linear algebra used by the solvers.
//!
//! Two solvers cover everything the discretizations produce: a Thomas sweep
//! for the tridiagonal systems of the transport steps, and an LU
//! factorization with partial pivoting for general banded systems, stored in
//! the usual banded layout with kl extra rows for pivoting fill-in. The
//! charge problem's interleaved unknown ordering keeps its bandwidth at
//! kl = ku = 2 regardless of mesh size, so a banded solve is linear in the
//! number of cells.

use crate::error::{Error, Result};

/// Solve a tridiagonal system in place via the Thomas algorithm.
/// `lower` and `upper` have length n - 1, `diag` and `rhs` length n.
/// No pivoting; intended for the diagonally dominant systems produced by
/// backward Euler diffusion steps.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = diag.len();
    assert!(n >= 1);
    assert_eq!(lower.len(), n - 1);
    assert_eq!(upper.len(), n - 1);
    assert_eq!(rhs.len(), n);

    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    if diag[0] == 0.0 {
        return Err(Error::Singular("tridiagonal: zero leading pivot".into()));
    }
    c_prime[0] = if n > 1 { upper[0] / diag[0] } else { 0.0 };
    d_prime[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - lower[i - 1] * c_prime[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Singular(format!(
                "tridiagonal: pivot {denom} at row {i}"
            )));
        }
        if i < n - 1 {
            c_prime[i] = upper[i] / denom;
        }
        d_prime[i] = (rhs[i] - lower[i - 1] * d_prime[i - 1]) / denom;
    }
    let mut x = d_prime;
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] -= c_prime[i] * next;
    }
    Ok(x)
}

/// Banded matrix with kl subdiagonals and ku superdiagonals, stored
/// column-major with 2 kl + ku + 1 rows per column. The top kl rows hold
/// fill-in created by row pivoting during factorization.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    rows: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let rows = 2 * kl + ku + 1;
        BandMatrix {
            n,
            kl,
            ku,
            rows,
            data: vec![0.0; rows * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.ku + self.kl >= j && j + self.kl >= i, "({i},{j}) outside storage");
        j * self.rows + (self.kl + self.ku + i - j)
    }

    /// True when (i, j) lies inside the logical band.
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i + self.ku >= j && j + self.kl >= i
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "set({i},{j}) outside band");
        let s = self.slot(i, j);
        self.data[s] = value;
    }

    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "add({i},{j}) outside band");
        let s = self.slot(i, j);
        self.data[s] += value;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.slot(i, j)]
        } else {
            0.0
        }
    }

    /// Zero every entry of row i inside the logical band. Used to replace an
    /// equation by a pinning constraint before factorization.
    pub fn clear_row(&mut self, i: usize) {
        let j_lo = i.saturating_sub(self.kl);
        let j_hi = (i + self.ku).min(self.n - 1);
        for j in j_lo..=j_hi {
            let s = self.slot(i, j);
            self.data[s] = 0.0;
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let i_lo = j.saturating_sub(self.ku);
            let i_hi = (j + self.kl).min(self.n - 1);
            for i in i_lo..=i_hi {
                m[(i, j)] = self.get(i, j);
            }
        }
        m
    }

    /// LU factorization with partial pivoting followed by the two triangular
    /// solves, consuming the matrix. Mirrors the standard banded algorithm:
    /// the pivot row is searched within the kl rows below the diagonal and
    /// row swaps stay inside the widened band.
    pub fn solve(mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        assert_eq!(rhs.len(), n);
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("banded: non-finite matrix entry".into()));
        }
        let kl = self.kl;
        let ku = self.ku;
        let mut pivots = vec![0usize; n];
        let mut x = rhs.to_vec();

        for k in 0..n {
            let i_max = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.slot(k, k)].abs();
            for i in k + 1..=i_max {
                let v = self.data[self.slot(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(Error::Singular(format!("banded: zero pivot column {k}")));
            }
            pivots[k] = p;
            let j_hi = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=j_hi {
                    let sk = self.slot(k, j);
                    let sp = self.slot(p, j);
                    self.data.swap(sk, sp);
                }
            }
            let pivot = self.data[self.slot(k, k)];
            for i in k + 1..=i_max {
                let s_ik = self.slot(i, k);
                let m = self.data[s_ik] / pivot;
                self.data[s_ik] = m;
                if m != 0.0 {
                    for j in k + 1..=j_hi {
                        let s_kj = self.slot(k, j);
                        let s_ij = self.slot(i, j);
                        self.data[s_ij] -= m * self.data[s_kj];
                    }
                }
            }
        }

        for k in 0..n {
            let p = pivots[k];
            if p != k {
                x.swap(k, p);
            }
            let i_max = (k + kl).min(n - 1);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=i_max {
                    x[i] -= self.data[self.slot(i, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let j_hi = (k + kl + ku).min(n - 1);
            let mut sum = x[k];
            for j in k + 1..=j_hi {
                sum -= self.data[self.slot(k, j)] * x[j];
            }
            let pivot = self.data[self.slot(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::Singular(format!("banded: zero pivot row {k}")));
            }
            x[k] = sum / pivot;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn tridiagonal_solves_a_hand_system() {
        // [2 1 0; 1 3 1; 0 1 2] x = [3, 10, 9] has solution [0.5, 2, 3.5].
        let x = solve_tridiagonal(&[1.0, 1.0], &[2.0, 3.0, 2.0], &[1.0, 1.0], &[3.0, 10.0, 9.0])
            .unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14);
        assert!((x[1] - 2.0).abs() < 1e-14);
        assert!((x[2] - 3.5).abs() < 1e-14);
    }

    #[test]
    fn tridiagonal_matches_dense_on_random_dominant_systems() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5 {
            let n = 40;
            let lower: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upper: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let diag: Vec<f64> = (0..n).map(|_| 4.0 + rng.gen_range(0.0..1.0)).collect();
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let x = solve_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();

            let mut dense = nalgebra::DMatrix::zeros(n, n);
            for i in 0..n {
                dense[(i, i)] = diag[i];
                if i + 1 < n {
                    dense[(i + 1, i)] = lower[i];
                    dense[(i, i + 1)] = upper[i];
                }
            }
            let reference = dense
                .lu()
                .solve(&nalgebra::DVector::from_column_slice(&rhs))
                .unwrap();
            for i in 0..n {
                assert!((x[i] - reference[i]).abs() < 1e-12, "row {i}");
            }
        }
    }

    #[test]
    fn banded_solve_agrees_with_dense_lu() {
        let mut rng = StdRng::seed_from_u64(42);
        for trial in 0..6 {
            let n = 25;
            let (kl, ku) = (2, 2);
            let mut band = BandMatrix::new(n, kl, ku);
            for i in 0..n {
                for j in 0..n {
                    if band.in_band(i, j) {
                        band.set(i, j, rng.gen_range(-1.0..1.0));
                    }
                }
                // Push mass onto the diagonal often enough to keep the
                // systems comfortably conditioned.
                band.add(i, i, 3.0);
            }
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dense = band.to_dense();
            let x = band.solve(&rhs).unwrap();
            let reference = dense
                .lu()
                .solve(&nalgebra::DVector::from_column_slice(&rhs))
                .unwrap();
            for i in 0..n {
                assert!(
                    (x[i] - reference[i]).abs() < 1e-10,
                    "trial {trial} row {i}: {} vs {}",
                    x[i],
                    reference[i]
                );
            }
        }
    }

    #[test]
    fn banded_solve_pivots_through_a_zero_diagonal() {
        // [[0, 1], [1, 0]] swaps the unknowns; without pivoting this would
        // divide by zero immediately.
        let mut band = BandMatrix::new(2, 1, 1);
        band.set(0, 1, 1.0);
        band.set(1, 0, 1.0);
        let x = band.solve(&[3.0, 4.0]).unwrap();
        assert_eq!(x, vec![4.0, 3.0]);
    }

    #[test]
    fn banded_solve_keeps_residuals_small_with_pivot_stress() {
        let mut rng = StdRng::seed_from_u64(11);
        let n = 60;
        let (kl, ku) = (2, 2);
        let mut band = BandMatrix::new(n, kl, ku);
        for i in 0..n {
            for j in 0..n {
                if band.in_band(i, j) {
                    band.set(i, j, rng.gen_range(-1.0..1.0));
                }
            }
            // Tiny diagonals force row exchanges.
            if i % 3 == 0 {
                band.set(i, i, 1e-14);
            }
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dense = band.clone().to_dense();
        let x = band.solve(&rhs).unwrap();
        let xv = nalgebra::DVector::from_column_slice(&x);
        let residual = dense * xv - nalgebra::DVector::from_column_slice(&rhs);
        let scale: f64 = x.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        assert!(
            residual.amax() < 1e-10 * scale,
            "residual {} at scale {scale}",
            residual.amax()
        );
    }

    #[test]
    fn singular_systems_are_reported() {
        let band = BandMatrix::new(4, 2, 2);
        assert!(matches!(
            band.solve(&[1.0; 4]),
            Err(Error::Singular(_))
        ));
        let err = solve_tridiagonal(&[0.0], &[1.0, 0.0], &[0.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn clear_row_then_pin_builds_a_constraint_row() {
        let mut band = BandMatrix::new(5, 2, 2);
        for i in 0..5 {
            for j in 0..5 {
                if band.in_band(i, j) {
                    band.set(i, j, 1.0 + (i * 5 + j) as f64);
                }
            }
        }
        band.clear_row(2);
        band.set(2, 2, 1.0);
        for j in 0..5 {
            let expected = if j == 2 { 1.0 } else { 0.0 };
            assert_eq!(band.get(2, j), expected);
        }
    }
}
