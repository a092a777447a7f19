//! Linear time-invariant building blocks: transfer functions, state-space
//! models, eigenvalues and fixed-step time integration.

pub mod poly;
mod ss;
mod tf;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use poly::C64;
pub use ss::{StateSpace, StateSpaceRecord};
pub use tf::{bode_csv, bode_rows, fmt_sig, logspace, unwrap_deg, wrap_deg, FrequencyResponsePoint, TransferFunction};

/// All eigenvalues of a square real matrix, sorted by real part then
/// imaginary part.
pub fn eigen(a: &DMatrix<f64>) -> Result<Vec<C64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!("eigen: matrix is {}x{}", a.nrows(), a.ncols())));
    }
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Lti("eigen: non-finite matrix entry".into()));
    }
    let mut ev: Vec<C64> = balance(a).complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    Ok(ev)
}

/// Diagonal similarity scaling by powers of two so that each row and column
/// pair has comparable norm (Parlett–Reinsch). Companion matrices of
/// polynomials with widely spread coefficients need this before QR.
fn balance(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let radix = 2.0f64;
    let mut converged = false;
    let mut sweeps = 0;
    while !converged && sweeps < 100 {
        converged = true;
        sweeps += 1;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += m[(j, i)].abs();
                    r += m[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let (mut cc, mut rr) = (c, r);
            while cc < rr / radix {
                f *= radix;
                cc *= radix;
                rr /= radix;
            }
            while cc >= rr * radix {
                f /= radix;
                cc /= radix;
                rr *= radix;
            }
            if (cc + rr) < 0.95 * s {
                converged = false;
                for j in 0..n {
                    m[(i, j)] /= f;
                    m[(j, i)] *= f;
                }
            }
        }
    }
    m
}

/// Frequency and damping of one eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub eigenvalue: C64,
    pub freq_hz: f64,
    pub damping_ratio: f64,
}

impl ModeReport {
    pub fn from_eigenvalue(l: C64) -> Self {
        let mag = l.norm();
        let damping_ratio = if mag > 0.0 { -l.re / mag } else { 0.0 };
        Self { eigenvalue: l, freq_hz: l.im.abs() / (2.0 * PI), damping_ratio }
    }

    /// Eigenvalue with the given natural frequency (Hz) and damping ratio,
    /// upper half plane.
    pub fn eigenvalue_for(freq_natural_hz: f64, zeta: f64) -> C64 {
        let wn = 2.0 * PI * freq_natural_hz;
        C64::new(-zeta * wn, wn * (1.0 - zeta * zeta).sqrt())
    }
}

/// Largest step allowed for RK4 on a system with these eigenvalues: 20
/// samples per period of the fastest oscillation, and `|λ|·dt ≤ 2.5` for
/// stability of the explicit scheme.
pub fn max_step(eigenvalues: &[C64]) -> f64 {
    let mut req = f64::INFINITY;
    for l in eigenvalues {
        let f = l.im.abs() / (2.0 * PI);
        if f > 0.0 {
            req = req.min(1.0 / (20.0 * f));
        }
        let m = l.norm();
        if m > 0.0 {
            req = req.min(2.5 / m);
        }
    }
    req
}

/// Classical fourth-order Runge–Kutta on a state-space model with the input
/// held constant across each step.
#[derive(Debug, Clone)]
pub struct Rk4 {
    sys: StateSpace,
    x: DVector<f64>,
    dt: f64,
}

impl Rk4 {
    pub fn new(sys: StateSpace, dt: f64, x0: Option<DVector<f64>>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Lti(format!("time step must be positive, got {dt}")));
        }
        let required = max_step(&sys.eigenvalues()?);
        if dt > required {
            return Err(Error::StepTooLarge { dt, required });
        }
        let n = sys.order();
        let x = match x0 {
            Some(x) if x.len() != n => {
                return Err(Error::Dimension(format!("initial state has {} entries, expected {n}", x.len())))
            }
            Some(x) => x,
            None => DVector::zeros(n),
        };
        Ok(Self { sys, x, dt })
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn system(&self) -> &StateSpace {
        &self.sys
    }

    /// Output at the current state for input `u`.
    pub fn output(&self, u: &DVector<f64>) -> DVector<f64> {
        self.sys.output(&self.x, u)
    }

    /// Advance one step with `u` held.
    pub fn step(&mut self, u: &DVector<f64>) {
        if self.sys.order() == 0 {
            return;
        }
        let h = self.dt;
        let bu = self.sys.b() * u;
        let f = |x: &DVector<f64>| self.sys.a() * x + &bu;
        let k1 = f(&self.x);
        let k2 = f(&(&self.x + &k1 * (h / 2.0)));
        let k3 = f(&(&self.x + &k2 * (h / 2.0)));
        let k4 = f(&(&self.x + &k3 * h));
        self.x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
}

/// Simulate a single-input single-output system. Sample `k` of the output is
/// `y(k·dt)`, computed before the input sample `k` is applied over the step.
pub fn simulate(ss: &StateSpace, input: &[f64], dt: f64, x0: Option<&[f64]>) -> Result<Vec<f64>> {
    if ss.n_inputs() != 1 || ss.n_outputs() != 1 {
        return Err(Error::Dimension("simulate expects a SISO system".into()));
    }
    let mut rk = Rk4::new(ss.clone(), dt, x0.map(DVector::from_column_slice))?;
    let mut out = Vec::with_capacity(input.len());
    let mut u = DVector::zeros(1);
    for &v in input {
        u[0] = v;
        out.push(rk.output(&u)[0]);
        rk.step(&u);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn close_sets(mut a: Vec<C64>, mut b: Vec<C64>, tol: f64) -> bool {
        if a.len() != b.len() {
            return false;
        }
        for x in a.drain(..) {
            let (k, d) = b
                .iter()
                .enumerate()
                .map(|(k, y)| (k, (x - y).norm()))
                .min_by(|p, q| p.1.total_cmp(&q.1))
                .unwrap();
            if d > tol {
                return false;
            }
            b.remove(k);
        }
        true
    }

    #[test]
    fn diagonal_and_rotation() {
        let ev = eigen(&DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]))).unwrap();
        assert!(close_sets(ev, vec![C64::new(-1.0, 0.0), C64::new(-2.0, 0.0)], 1e-14));
        let w = 2.0 * PI * 0.45;
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0]);
        let ev = eigen(&rot).unwrap();
        assert!(close_sets(ev, vec![C64::new(0.0, 2.827433), C64::new(0.0, -2.827433)], 1e-6));
    }

    #[test]
    fn non_square_rejected() {
        assert!(matches!(eigen(&DMatrix::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn companion_quadratic() {
        // s^2 + 0.2 s + 4: quadratic-formula roots.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.2]);
        let disc = (0.2f64 * 0.2 - 16.0).abs().sqrt() / 2.0;
        let expect = vec![C64::new(-0.1, disc), C64::new(-0.1, -disc)];
        assert!(close_sets(eigen(&a).unwrap(), expect, 1e-10));
    }

    #[test]
    fn mode_report_formulas() {
        let l = ModeReport::eigenvalue_for(0.45, 0.02);
        let m = ModeReport::from_eigenvalue(l);
        assert_relative_eq!(m.damping_ratio, 0.02, epsilon = 1e-12);
        assert_relative_eq!(m.freq_hz, l.im / (2.0 * PI));
        assert_eq!(ModeReport::from_eigenvalue(C64::new(0.0, 0.0)).damping_ratio, 0.0);
    }

    #[test]
    fn zero_input_stays_zero() {
        let ss = TransferFunction::new(vec![1.0], vec![4.0, 0.2, 1.0]).unwrap().to_state_space().unwrap();
        let y = simulate(&ss, &vec![0.0; 1000], 1e-3, None).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_order_step() {
        let ss = TransferFunction::new(vec![1.0], vec![1.0, 1.0]).unwrap().to_state_space().unwrap();
        let y = simulate(&ss, &vec![1.0; 1001], 1e-3, None).unwrap();
        assert!((y[1000] - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn step_guard_names_required_step() {
        let w = 2.0 * PI * 1.0;
        let ss = TransferFunction::new(vec![w * w], vec![w * w, 0.0, 1.0]).unwrap().to_state_space().unwrap();
        match simulate(&ss, &[1.0], 0.1, None) {
            Err(Error::StepTooLarge { required, .. }) => assert_relative_eq!(required, 0.05, epsilon = 1e-9),
            other => panic!("unexpected {other:?}"),
        }
    }
}
