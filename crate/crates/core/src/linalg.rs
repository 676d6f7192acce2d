//! Thin helpers over faer: a reusable sparse LU and a compressed sparse
//! column matrix with the handful of products the model needs.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{Error, Result};

/// Sparse LU factorization of a square matrix, kept for repeated solves.
pub struct SparseLu {
    n: usize,
    lu: Lu<usize, f64>,
    matrix: SparseColMat<usize, f64>,
}

impl SparseLu {
    pub fn factor(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let entries: Vec<_> = triplets
            .iter()
            .map(|&(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let matrix = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &entries)
            .map_err(|e| Error::SingularJacobian(format!("invalid sparse structure: {e:?}")))?;
        let lu = matrix
            .sp_lu()
            .map_err(|e| Error::SingularJacobian(format!("{e:?}")))?;
        let this = Self { n, lu, matrix };
        this.probe()?;
        Ok(this)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// The factorization does not report numerical singularity, so solve a
    /// probe system and look at the result.
    fn probe(&self) -> Result<()> {
        if self.n == 0 {
            return Ok(());
        }
        let b: Vec<f64> = (0..self.n).map(|i| 1.0 + (i % 7) as f64 * 0.125).collect();
        let mut x = b.clone();
        self.solve(&mut x)?;
        let r = self.residual(&x, &b);
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(r <= 1e-6 * scale.max(1.0)) {
            return Err(Error::SingularJacobian(format!(
                "probe solve residual {r:e}"
            )));
        }
        Ok(())
    }

    fn residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.n];
        let sym = self.matrix.symbolic();
        let vals = self.matrix.val();
        for j in 0..self.n {
            for idx in sym.col_range(j) {
                ax[sym.row_idx()[idx]] += vals[idx] * x[j];
            }
        }
        ax.iter()
            .zip(b)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn solve(&self, b: &mut [f64]) -> Result<()> {
        let mut rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        for (i, v) in b.iter_mut().enumerate() {
            *v = rhs[(i, 0)];
        }
        check_finite(b)
    }

    pub fn solve_transpose(&self, b: &mut [f64]) -> Result<()> {
        let mut rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_transpose_in_place(rhs.as_mut());
        for (i, v) in b.iter_mut().enumerate() {
            *v = rhs[(i, 0)];
        }
        check_finite(b)
    }

    pub fn solve_many(&self, rhs: &mut Mat<f64>) -> Result<()> {
        self.lu.solve_in_place(rhs.as_mut());
        (0..rhs.ncols()).try_for_each(|j| check_finite(rhs.col_as_slice(j)))
    }

    pub fn solve_transpose_many(&self, rhs: &mut Mat<f64>) -> Result<()> {
        self.lu.solve_transpose_in_place(rhs.as_mut());
        (0..rhs.ncols()).try_for_each(|j| check_finite(rhs.col_as_slice(j)))
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SingularJacobian("solve produced non-finite values".into()))
    }
}

/// Compressed sparse column matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csc {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csc {
    /// Builds from per-column entry lists; duplicate rows are summed.
    pub fn from_columns(nrows: usize, columns: Vec<Vec<(usize, f64)>>) -> Self {
        let ncols = columns.len();
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for mut col in columns {
            col.sort_by_key(|(r, _)| *r);
            let start = row_idx.len();
            for (r, v) in col {
                debug_assert!(r < nrows);
                if row_idx.len() > start && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (j, xj) in x.iter().enumerate() {
            if *xj != 0.0 {
                for (i, v) in self.col(j) {
                    y[i] += v * xj;
                }
            }
        }
        y
    }

    /// `self^T x`.
    pub fn tmul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| self.col(j).map(|(i, v)| v * x[i]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Csc {
        let mut columns = vec![Vec::new(); self.nrows];
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                columns[i].push((j, v));
            }
        }
        Csc::from_columns(self.ncols, columns)
    }

    /// Sparse product `self * other`.
    pub fn mul(&self, other: &Csc) -> Csc {
        assert_eq!(self.ncols, other.nrows);
        let columns = (0..other.ncols)
            .map(|j| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for (k, b) in other.col(j) {
                    for (i, a) in self.col(k) {
                        acc.push((i, a * b));
                    }
                }
                acc
            })
            .collect();
        Csc::from_columns(self.nrows, columns)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.ncols)
            .flat_map(|j| self.col(j).map(move |(i, v)| (i, j, v)))
            .collect()
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                m[(i, j)] += v;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        // [[4, 1], [2, 3]] x = [1, 2]
        let lu = SparseLu::factor(2, &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, 3.0)]).unwrap();
        let mut x = vec![1.0, 2.0];
        lu.solve(&mut x).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-15);
        assert!((x[1] - 0.6).abs() < 1e-15);
        let mut y = vec![1.0, 2.0];
        lu.solve_transpose(&mut y).unwrap();
        // [[4, 2], [1, 3]] y = [1, 2]
        assert!((y[0] + 0.1).abs() < 1e-15);
        assert!((y[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let r = SparseLu::factor(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 4.0)]);
        assert!(matches!(r, Err(Error::SingularJacobian(_))));
        let r = SparseLu::factor(2, &[(0, 0, 1.0), (1, 0, 2.0)]);
        assert!(matches!(r, Err(Error::SingularJacobian(_))));
    }

    #[test]
    fn csc_products() {
        let a = Csc::from_columns(2, vec![vec![(0, 1.0), (1, 2.0)], vec![(1, 3.0), (1, 1.0)]]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.mul_vec(&[1.0, 1.0]), vec![1.0, 6.0]);
        assert_eq!(a.tmul_vec(&[1.0, 1.0]), vec![3.0, 4.0]);
        let at = a.transpose();
        let p = a.mul(&at).to_dense();
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(0, 1)], 2.0);
        assert_eq!(p[(1, 1)], 20.0);
    }
}
