//! Dense linear solves for `(I - gamma P) x = b` systems.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};

/// LU factorization of `I - gamma * P`, reusable across right-hand sides.
#[derive(Clone, Debug)]
pub struct ResolventSolver {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_transpose: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ResolventSolver {
    pub fn new(kernel: &DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n = kernel.nrows();
        if kernel.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "kernel must be square, got {}x{}",
                n,
                kernel.ncols()
            )));
        }
        let system = DMatrix::<f64>::identity(n, n) - kernel * gamma;
        let lu_transpose = system.transpose().lu();
        let lu = system.lu();
        if !lu.is_invertible() {
            return Err(Error::SingularSystem);
        }
        Ok(Self { lu, lu_transpose })
    }

    /// Solves `(I - gamma P) x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu.solve(rhs).ok_or(Error::SingularSystem)
    }

    /// Solves `(I - gamma P)^T x = rhs`.
    pub fn solve_transpose(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu_transpose.solve(rhs).ok_or(Error::SingularSystem)
    }

    /// Explicit `(I - gamma P)^{-1}`.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.lu.try_inverse().ok_or(Error::SingularSystem)
    }
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sum_abs(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}
