use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::eigen;
use super::poly::C64;
use crate::error::{Error, Result};

/// Continuous-time state-space model `x' = Ax + Bu`, `y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

/// Row-major matrices for JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSpaceRecord {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!("C has {} columns, expected {n}", c.ncols())));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::Dimension(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn gain(k: f64) -> Self {
        Self {
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, 1),
            c: DMatrix::zeros(1, 0),
            d: DMatrix::from_element(1, 1, k),
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn record(&self) -> StateSpaceRecord {
        StateSpaceRecord { a: rows(&self.a), b: rows(&self.b), c: rows(&self.c), d: rows(&self.d) }
    }

    /// Keep only input column `j`.
    pub fn select_input(&self, j: usize) -> Result<StateSpace> {
        if j >= self.n_inputs() {
            return Err(Error::Dimension(format!("input {j} of {}", self.n_inputs())));
        }
        StateSpace::new(
            self.a.clone(),
            self.b.columns(j, 1).into_owned(),
            self.c.clone(),
            self.d.columns(j, 1).into_owned(),
        )
    }

    /// Cascade: the outputs of `self` drive the inputs of `next`.
    pub fn series(&self, next: &StateSpace) -> Result<StateSpace> {
        if self.n_outputs() != next.n_inputs() {
            return Err(Error::Dimension(format!(
                "series: {} outputs feed {} inputs",
                self.n_outputs(),
                next.n_inputs()
            )));
        }
        let (n1, n2) = (self.order(), next.order());
        let mut a = DMatrix::zeros(n1 + n2, n1 + n2);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((n1, n1), (n2, n2)).copy_from(&next.a);
        a.view_mut((n1, 0), (n2, n1)).copy_from(&(&next.b * &self.c));
        let mut b = DMatrix::zeros(n1 + n2, self.n_inputs());
        b.view_mut((0, 0), (n1, self.n_inputs())).copy_from(&self.b);
        b.view_mut((n1, 0), (n2, self.n_inputs())).copy_from(&(&next.b * &self.d));
        let mut c = DMatrix::zeros(next.n_outputs(), n1 + n2);
        c.view_mut((0, 0), (next.n_outputs(), n1)).copy_from(&(&next.d * &self.c));
        c.view_mut((0, n1), (next.n_outputs(), n2)).copy_from(&next.c);
        let d = &next.d * &self.d;
        StateSpace::new(a, b, c, d)
    }

    /// Unity negative feedback `u = r - y` around a square system.
    pub fn feedback_negative(&self) -> Result<StateSpace> {
        let m = self.n_inputs();
        if self.n_outputs() != m {
            return Err(Error::Dimension("feedback requires as many outputs as inputs".into()));
        }
        let i_plus_d = DMatrix::<f64>::identity(m, m) + &self.d;
        let inv = i_plus_d
            .try_inverse()
            .ok_or_else(|| Error::Lti("algebraic loop: I + D is singular".into()))?;
        let a = &self.a - &self.b * &inv * &self.c;
        let b = &self.b * &inv;
        let c = &inv * &self.c;
        let d = &inv * &self.d;
        StateSpace::new(a, b, c, d)
    }

    /// `C (sI - A)^{-1} B + D` for a single-input single-output system.
    pub fn eval(&self, s: C64) -> Result<C64> {
        if self.n_inputs() != 1 || self.n_outputs() != 1 {
            return Err(Error::Dimension("eval expects a SISO system".into()));
        }
        let n = self.order();
        let d = C64::new(self.d[(0, 0)], 0.0);
        if n == 0 {
            return Ok(d);
        }
        let m = DMatrix::<C64>::from_fn(n, n, |i, j| {
            let diag = if i == j { s } else { C64::new(0.0, 0.0) };
            diag - C64::new(self.a[(i, j)], 0.0)
        });
        let rhs = DVector::<C64>::from_fn(n, |i, _| C64::new(self.b[(i, 0)], 0.0));
        let x = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Lti(format!("sI - A singular at s = {s}")))?;
        let y = (0..n).fold(C64::new(0.0, 0.0), |acc, i| acc + x[i] * self.c[(0, i)]);
        Ok(y + d)
    }

    pub fn eigenvalues(&self) -> Result<Vec<C64>> {
        eigen(&self.a)
    }

    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u
    }

    pub fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::TransferFunction;
    use approx::assert_relative_eq;

    #[test]
    fn dimension_checks() {
        let a = DMatrix::zeros(2, 2);
        assert!(StateSpace::new(a.clone(), DMatrix::zeros(3, 1), DMatrix::zeros(1, 2), DMatrix::zeros(1, 1)).is_err());
        assert!(StateSpace::new(a.clone(), DMatrix::zeros(2, 1), DMatrix::zeros(1, 3), DMatrix::zeros(1, 1)).is_err());
        assert!(StateSpace::new(a, DMatrix::zeros(2, 1), DMatrix::zeros(1, 2), DMatrix::zeros(2, 1)).is_err());
        assert!(StateSpace::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2), DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn series_matches_tf_product() {
        let g1 = TransferFunction::new(vec![1.0, 0.5], vec![1.0, 2.0, 3.0]).unwrap();
        let g2 = TransferFunction::new(vec![2.0, 1.0], vec![1.0, 0.3]).unwrap();
        let ss = g1.to_state_space().unwrap().series(&g2.to_state_space().unwrap()).unwrap();
        for w in [0.1, 1.0, 3.0] {
            let s = C64::new(0.0, w);
            let expect = g1.eval(s) * g2.eval(s);
            let got = ss.eval(s).unwrap();
            assert_relative_eq!((got - expect).norm() / expect.norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn feedback_matches_closed_loop_formula() {
        let l = TransferFunction::new(vec![2.0], vec![1.0, 1.0, 1.0]).unwrap();
        let cl = l.to_state_space().unwrap().feedback_negative().unwrap();
        for w in [0.2, 1.5] {
            let s = C64::new(0.0, w);
            let g = l.eval(s);
            let expect = g / (g + 1.0);
            assert_relative_eq!((cl.eval(s).unwrap() - expect).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn select_input_column() {
        let ss = StateSpace::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 3.0]),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 2),
        )
        .unwrap();
        let q = ss.select_input(1).unwrap();
        assert_eq!(q.b()[(0, 0)], 3.0);
        assert!(ss.select_input(2).is_err());
    }
}
