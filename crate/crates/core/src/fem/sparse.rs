//! Compressed sparse row storage and the two linear solvers used for the
//! symmetric positive-definite systems of the scheme: a banded Cholesky
//! factorization and a conjugate-gradient fallback.

use crate::error::{Error, Result};

/// Square CSR matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> CsrMatrix {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// `y = A x`
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `xᵀ A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let mut r = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                r += self.values[k] * y[self.col_idx[k]];
            }
            s += xi * r;
        }
        s
    }

    /// `self + c * other`; both operands must share one sparsity pattern.
    pub fn add_scaled(&self, c: f64, other: &CsrMatrix) -> CsrMatrix {
        assert!(
            self.row_ptr == other.row_ptr && self.col_idx == other.col_idx,
            "add_scaled needs identical sparsity patterns"
        );
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect();
        CsrMatrix { n: self.n, row_ptr: self.row_ptr.clone(), col_idx: self.col_idx.clone(), values }
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Lower-triangular Cholesky factor stored by band rows: row `i` holds
/// `L[i][i-b..=i]` (missing leading entries padded with zeros).
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    band: usize,
    factor: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<BandedCholesky> {
        let n = a.n();
        let band = a.bandwidth();
        let w = band + 1;
        let mut l = vec![0.0; n * w];
        // slot of (i, j) with i - band <= j <= i
        let at = |i: usize, j: usize| i * w + (j + band - i);
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    l[at(i, j)] = v;
                }
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(band);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(band));
                let mut s = l[at(i, j)];
                for k in klo..j {
                    s -= l[at(i, k)] * l[at(j, k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Numerical {
                            message: format!("nonpositive pivot {s:e} at row {i} in Cholesky factorization"),
                            residual: f64::NAN,
                        });
                    }
                    l[at(i, i)] = s.sqrt();
                } else {
                    l[at(i, j)] = s / l[at(j, j)];
                }
            }
        }
        Ok(BandedCholesky { n, band, factor: l })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Solves `L Lᵀ x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        let (n, band, w) = (self.n, self.band, self.band + 1);
        let l = &self.factor;
        for i in 0..n {
            let lo = i.saturating_sub(band);
            let row = &l[i * w..(i + 1) * w];
            let mut s = x[i];
            for k in lo..i {
                s -= row[k + band - i] * x[k];
            }
            x[i] = s / row[band];
        }
        for i in (0..n).rev() {
            let hi = (i + band).min(n - 1);
            let mut s = x[i];
            for k in i + 1..=hi {
                s -= l[k * w + (i + band - k)] * x[k];
            }
            x[i] = s / l[i * w + band];
        }
    }
}

/// Conjugate gradients on an SPD matrix. Returns the solution and the final
/// relative residual.
pub fn conjugate_gradient(a: &CsrMatrix, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64)> {
    let n = a.n();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, 0.0));
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..max_iter {
        if rr.sqrt() <= rel_tol * bnorm {
            return Ok((x, rr.sqrt() / bnorm));
        }
        a.mul_vec_into(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(u, v)| u * v).sum();
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    let rel = rr.sqrt() / bnorm;
    if rel <= rel_tol {
        Ok((x, rel))
    } else {
        Err(Error::Numerical { message: format!("conjugate gradient did not converge in {max_iter} iterations"), residual: rel })
    }
}

/// SPD solver: banded Cholesky when the factorization succeeds, CG otherwise.
#[derive(Debug, Clone)]
pub enum SpdSolver {
    Direct(BandedCholesky),
    Iterative { matrix: CsrMatrix, rel_tol: f64, max_iter: usize },
}

impl SpdSolver {
    pub fn new(a: &CsrMatrix) -> SpdSolver {
        match BandedCholesky::factor(a) {
            Ok(f) => SpdSolver::Direct(f),
            Err(_) => SpdSolver::iterative(a),
        }
    }

    pub fn iterative(a: &CsrMatrix) -> SpdSolver {
        SpdSolver::Iterative { matrix: a.clone(), rel_tol: 1e-12, max_iter: 10 * a.n().max(1) }
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            SpdSolver::Direct(f) => {
                let mut x = rhs.to_vec();
                f.solve_in_place(&mut x);
                Ok(x)
            }
            SpdSolver::Iterative { matrix, rel_tol, max_iter } => {
                conjugate_gradient(matrix, rhs, *rel_tol, *max_iter).map(|(x, _)| x)
            }
        }
    }

    pub fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        match self {
            SpdSolver::Direct(f) => {
                f.solve_in_place(x);
                Ok(())
            }
            _ => {
                let y = self.solve(x)?;
                x.copy_from_slice(&y);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (1, 1, 2.0), (0, 0, 0.5), (0, 1, 3.0)]);
        assert_eq!(a.get(0, 0), 1.5);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.nnz(), 3);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(BandedCholesky::factor(&a), Err(Error::Numerical { .. })));
    }

    #[test]
    fn cg_matches_direct() {
        let a = laplacian_1d(30, 0.1);
        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let direct = SpdSolver::new(&a).solve(&b).unwrap();
        let (cg, res) = conjugate_gradient(&a, &b, 1e-13, 300).unwrap();
        assert!(res <= 1e-13);
        for (u, v) in direct.iter().zip(&cg) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn banded_solve_has_small_residual(
            n in 1usize..40,
            band in 1usize..6,
            seed in proptest::collection::vec(-1.0f64..1.0, 300),
        ) {
            // diagonally dominant symmetric banded matrix
            let mut t = Vec::new();
            let mut k = 0;
            for i in 0..n {
                t.push((i, i, 2.0 * band as f64 + 1.0));
                for d in 1..=band {
                    if i + d < n {
                        let v = seed[k % seed.len()];
                        k += 1;
                        t.push((i, i + d, v));
                        t.push((i + d, i, v));
                    }
                }
            }
            let a = CsrMatrix::from_triplets(n, t);
            let b: Vec<f64> = (0..n).map(|i| seed[(i * 7) % seed.len()]).collect();
            let x = SpdSolver::new(&a).solve(&b).unwrap();
            let r = a.mul_vec(&x);
            let err = r.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            prop_assert!(err <= 1e-12 * bn.max(1.0));
        }
    }
}
