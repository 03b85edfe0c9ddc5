//! Banded matrices with an in-place LU factorization.
//!
//! The state systems are tridiagonal (stiffness plus reaction) or banded
//! with a bandwidth set by the averaging cells (stiffness plus low-rank
//! coupling whose factors are supported on one averaging cell each). Both
//! are strongly diagonally dominated by the stiffness block, so the
//! factorization runs without pivoting and reports the offending pivot if
//! it ever encounters a (near-)singular one.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("singular or indefinite system: pivot {value:.3e} at index {index}")]
    SingularPivot { index: usize, value: f64 },
    #[error("entry ({i},{j}) outside band (kl={kl}, ku={ku})")]
    OutOfBand { i: usize, j: usize, kl: usize, ku: usize },
}

/// Square banded matrix with `kl` sub- and `ku` superdiagonals, stored
/// row-major with one slot per diagonal offset.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = kl + ku + 1;
        BandMatrix {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let off = j as isize - i as isize;
        if off < -(self.kl as isize) || off > self.ku as isize {
            return None;
        }
        Some(i * self.width + (off + self.kl as isize) as usize)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) -> Result<(), LinalgError> {
        match self.slot(i, j) {
            Some(s) => {
                self.data[s] += v;
                Ok(())
            }
            None => Err(LinalgError::OutOfBand {
                i,
                j,
                kl: self.kl,
                ku: self.ku,
            }),
        }
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let j_lo = i.saturating_sub(self.kl);
            let j_hi = (i + self.ku).min(self.n - 1);
            let mut acc = 0.0;
            for j in j_lo..=j_hi {
                acc += self.get(i, j) * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// LU factorization without pivoting. Fill stays inside the band.
    pub fn factor(mut self) -> Result<BandLu, LinalgError> {
        let n = self.n;
        let scale = self
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        for k in 0..n {
            let pivot = self.get(k, k);
            if pivot.abs() <= 1e-14 * scale {
                return Err(LinalgError::SingularPivot {
                    index: k,
                    value: pivot,
                });
            }
            let i_hi = (k + self.kl).min(n - 1);
            let j_hi = (k + self.ku).min(n - 1);
            for i in k + 1..=i_hi {
                let l = self.get(i, k) / pivot;
                let s = self.slot(i, k).expect("within band");
                self.data[s] = l;
                if l != 0.0 {
                    for j in k + 1..=j_hi {
                        let upd = l * self.get(k, j);
                        if upd != 0.0 {
                            let s = self.slot(i, j).expect("within band");
                            self.data[s] -= upd;
                        }
                    }
                }
            }
        }
        Ok(BandLu { lu: self })
    }
}

/// Factored form of a [`BandMatrix`]; reusable for repeated solves.
#[derive(Debug, Clone)]
pub struct BandLu {
    lu: BandMatrix,
}

impl BandLu {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.lu.n;
        let mut x = rhs.to_vec();
        // Ly = b (unit lower triangle)
        for i in 0..n {
            let j_lo = i.saturating_sub(self.lu.kl);
            let mut acc = x[i];
            for j in j_lo..i {
                acc -= self.lu.get(i, j) * x[j];
            }
            x[i] = acc;
        }
        // Ux = y
        for i in (0..n).rev() {
            let j_hi = (i + self.lu.ku).min(n - 1);
            let mut acc = x[i];
            for j in i + 1..=j_hi {
                acc -= self.lu.get(i, j) * x[j];
            }
            x[i] = acc / self.lu.get(i, i);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Plain dense Gaussian elimination with partial pivoting, as an
    // independent check of the banded path.
    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
            m.swap(k, p);
            x.swap(k, p);
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                x[i] -= f * x[k];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let xj = x[j];
                x[i] -= m[i][j] * xj;
            }
            x[i] /= m[i][i];
        }
        x
    }

    #[test]
    fn banded_solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, kl, ku) in &[(6usize, 1usize, 1usize), (12, 2, 3), (20, 4, 2)] {
            let mut band = BandMatrix::zeros(n, kl, ku);
            let mut dense = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    band.add(i, j, v).unwrap();
                    dense[i][j] = v;
                }
                // Diagonal dominance so the no-pivot factorization is valid.
                band.add(i, i, 8.0).unwrap();
                dense[i][i] += 8.0;
            }
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x_band = band.clone().factor().unwrap().solve(&rhs);
            let x_dense = dense_solve(&dense, &rhs);
            for (a, b) in x_band.iter().zip(&x_dense) {
                assert!((a - b).abs() < 1e-10);
            }
            // Residual check on the banded route.
            let res = band.mat_vec(&x_band);
            for (r, b) in res.iter().zip(&rhs) {
                assert!((r - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let mut m = BandMatrix::zeros(3, 1, 1);
        m.add(0, 0, 1.0).unwrap();
        m.add(1, 1, 0.0).unwrap();
        m.add(2, 2, 1.0).unwrap();
        match m.factor() {
            Err(LinalgError::SingularPivot { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singular pivot, got {other:?}"),
        }
    }

    #[test]
    fn out_of_band_rejected() {
        let mut m = BandMatrix::zeros(5, 1, 1);
        assert!(m.add(0, 3, 1.0).is_err());
    }
}
