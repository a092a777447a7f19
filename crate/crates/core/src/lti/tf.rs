use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::poly::{self, C64};
use super::ss::StateSpace;
use crate::error::{Error, Result};

/// Rational transfer function `num(s) / den(s)` with coefficients in
/// ascending powers of `s`.
///
/// The canonical form trims high-power zeros and scales both polynomials so
/// that the lowest nonzero denominator coefficient is 1 (`den[0] = 1` for any
/// function without a pole at the origin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTf", into = "RawTf")]
pub struct TransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTf {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl TryFrom<RawTf> for TransferFunction {
    type Error = Error;
    fn try_from(raw: RawTf) -> Result<Self> {
        TransferFunction::new(raw.num, raw.den)
    }
}

impl From<TransferFunction> for RawTf {
    fn from(tf: TransferFunction) -> Self {
        RawTf { num: tf.num, den: tf.den }
    }
}

/// One point of a frequency response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyResponsePoint {
    pub freq_hz: f64,
    pub value: C64,
}

impl FrequencyResponsePoint {
    pub fn mag_db(&self) -> f64 {
        20.0 * self.value.norm().log10()
    }

    pub fn phase_deg(&self) -> f64 {
        self.value.arg().to_degrees()
    }
}

impl TransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if num.iter().chain(den.iter()).any(|c| !c.is_finite()) {
            return Err(Error::Lti("non-finite coefficient".into()));
        }
        let den = poly::trim(den);
        if den.is_empty() {
            return Err(Error::Lti("denominator is identically zero".into()));
        }
        let num = poly::trim(num);
        let lowest = den.iter().copied().find(|c| *c != 0.0).unwrap_or(1.0);
        Ok(Self {
            num: poly::scale(&num, 1.0 / lowest),
            den: poly::scale(&den, 1.0 / lowest),
        })
    }

    pub fn gain(k: f64) -> Self {
        Self::new(vec![k], vec![1.0]).expect("finite gain")
    }

    pub fn unity() -> Self {
        Self::gain(1.0)
    }

    pub fn zero() -> Self {
        Self::gain(0.0)
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn num_degree(&self) -> usize {
        poly::degree(&self.num)
    }

    pub fn den_degree(&self) -> usize {
        poly::degree(&self.den)
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_empty()
    }

    pub fn is_proper(&self) -> bool {
        self.is_zero() || self.num_degree() <= self.den_degree()
    }

    pub fn eval(&self, s: C64) -> C64 {
        poly::eval(&self.num, s) / poly::eval(&self.den, s)
    }

    /// Evaluate at `j·omega`, failing when the denominator vanishes there.
    pub fn eval_jw(&self, omega: f64) -> Result<C64> {
        let s = C64::new(0.0, omega);
        let d = poly::eval(&self.den, s);
        let scale = self.den.iter().map(|c| c.abs()).fold(0.0, f64::max).max(1.0);
        if d.norm() <= 1e-14 * scale {
            return Err(Error::PoleOnAxis { freq_hz: omega / (2.0 * PI) });
        }
        Ok(poly::eval(&self.num, s) / d)
    }

    pub fn freq_response(&self, freqs_hz: &[f64]) -> Result<Vec<FrequencyResponsePoint>> {
        freqs_hz
            .iter()
            .map(|&f| {
                if !(f > 0.0) {
                    return Err(Error::Lti(format!("frequency must be positive, got {f}")));
                }
                Ok(FrequencyResponsePoint { freq_hz: f, value: self.eval_jw(2.0 * PI * f)? })
            })
            .collect()
    }

    /// Phase in degrees at `omega` rad/s, continued from DC so that the value
    /// does not jump by multiples of 360° along the frequency axis.
    ///
    /// Each root contributes a continuous angle; the sum is re-anchored to the
    /// principal DC phase (sign of the static gain plus 90° per origin root).
    pub fn phase_at(&self, omega: f64) -> Result<f64> {
        if !(omega > 0.0) {
            return Err(Error::Lti(format!("omega must be positive, got {omega}")));
        }
        self.eval_jw(omega)?;
        if self.is_zero() {
            return Ok(0.0);
        }
        let zeros = self.zeros()?;
        let poles = self.poles()?;
        let raw = |w: f64| -> f64 {
            let z: f64 = zeros.iter().map(|r| root_angle(w, *r)).sum();
            let p: f64 = poles.iter().map(|r| root_angle(w, *r)).sum();
            z - p
        };
        Ok(raw(omega) - raw(0.0) + self.dc_phase_deg())
    }

    fn dc_phase_deg(&self) -> f64 {
        let k_num = self.num.iter().position(|c| *c != 0.0).unwrap_or(0);
        let k_den = self.den.iter().position(|c| *c != 0.0).unwrap_or(0);
        let sign = if self.num[k_num] * self.den[k_den] < 0.0 { 180.0 } else { 0.0 };
        let origin = (k_num as f64 - k_den as f64) * 90.0;
        let base = sign + origin;
        if sign != 0.0 && base > 180.0 {
            base - 360.0
        } else {
            base
        }
    }

    /// Cascade `self` followed by `other`.
    pub fn series(&self, other: &TransferFunction) -> TransferFunction {
        TransferFunction::new(poly::mul(&self.num, &other.num), poly::mul(&self.den, &other.den))
            .expect("product of well-formed denominators is nonzero")
    }

    pub fn scaled(&self, k: f64) -> TransferFunction {
        TransferFunction::new(poly::scale(&self.num, k), self.den.clone()).expect("finite scale")
    }

    pub fn poles(&self) -> Result<Vec<C64>> {
        poly::roots(&self.den)
    }

    pub fn zeros(&self) -> Result<Vec<C64>> {
        poly::roots(&self.num)
    }

    /// Controllable-canonical realization; the state count equals the
    /// denominator degree.
    pub fn to_state_space(&self) -> Result<StateSpace> {
        if !self.is_proper() {
            return Err(Error::Improper { num_degree: self.num_degree(), den_degree: self.den_degree() });
        }
        let n = self.den_degree();
        let lead = self.den[n];
        let a: Vec<f64> = self.den.iter().map(|c| c / lead).collect();
        let mut b: Vec<f64> = self.num.iter().map(|c| c / lead).collect();
        b.resize(n + 1, 0.0);
        let d = b[n];
        let mut am = DMatrix::<f64>::zeros(n, n);
        for i in 0..n.saturating_sub(1) {
            am[(i, i + 1)] = 1.0;
        }
        if n > 0 {
            for j in 0..n {
                am[(n - 1, j)] = -a[j];
            }
        }
        let mut bm = DMatrix::<f64>::zeros(n, 1);
        if n > 0 {
            bm[(n - 1, 0)] = 1.0;
        }
        let cm = DMatrix::from_row_slice(1, n, &(0..n).map(|j| b[j] - d * a[j]).collect::<Vec<_>>());
        StateSpace::new(am, bm, cm, DMatrix::from_element(1, 1, d))
    }

    /// Static gain `num(0)/den(0)`, infinite when there is a pole at the origin.
    pub fn dc_gain(&self) -> f64 {
        let n0 = self.num.first().copied().unwrap_or(0.0);
        n0 / self.den[0]
    }

    pub fn coefficients(&self) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_vec(self.num.clone()), DVector::from_vec(self.den.clone()))
    }
}

impl fmt::Display for TransferFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) / ({})", fmt_poly(&self.num), fmt_poly(&self.den))
    }
}

fn fmt_poly(p: &[f64]) -> String {
    if p.is_empty() {
        return "0".into();
    }
    let terms: Vec<String> = p
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(i, c)| match i {
            0 => format!("{c}"),
            1 => format!("{c} s"),
            _ => format!("{c} s^{i}"),
        })
        .collect();
    terms.join(" + ")
}

/// Continuous angle (degrees) of `jω - r` as ω sweeps upward from 0.
fn root_angle(omega: f64, r: C64) -> f64 {
    let tol = 1e-12 * r.norm().max(1.0);
    if r.norm() <= tol {
        return 90.0;
    }
    let y = omega - r.im;
    if r.re < -tol {
        y.atan2(-r.re).to_degrees()
    } else if r.re > tol {
        180.0 - (y / r.re).atan().to_degrees()
    } else if y >= 0.0 {
        90.0
    } else {
        -90.0
    }
}

/// Nearest-multiple-of-360° continuation of a phase sequence in degrees.
pub fn unwrap_deg(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for &p in phases {
        if let Some(q) = prev {
            offset -= ((p + offset - q) / 360.0).round() * 360.0;
        }
        let v = p + offset;
        out.push(v);
        prev = Some(v);
    }
    out
}

/// Wrap a phase in degrees into (-180, 180].
pub fn wrap_deg(p: f64) -> f64 {
    let w = p - 360.0 * (p / 360.0).round();
    if w <= -180.0 {
        w + 360.0
    } else {
        w
    }
}

/// `n` log-spaced points from `low` to `high` inclusive.
pub fn logspace(low: f64, high: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![low],
        _ => {
            let (a, b) = (low.ln(), high.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        low
                    } else if i == n - 1 {
                        high
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Frequency response as a Bode table with phase continued along the grid.
/// Returns (freq_hz, mag_db, phase_deg) rows.
pub fn bode_rows(tf: &TransferFunction, freqs_hz: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    let pts = tf.freq_response(freqs_hz)?;
    if pts.is_empty() {
        return Ok(Vec::new());
    }
    let first_phase = tf.phase_at(2.0 * PI * pts[0].freq_hz)?;
    let raw: Vec<f64> = pts.iter().map(|p| p.phase_deg()).collect();
    let mut phase = unwrap_deg(&raw);
    let shift = first_phase - phase[0];
    for p in &mut phase {
        *p += shift;
    }
    Ok(pts.iter().zip(phase).map(|(p, ph)| (p.freq_hz, p.mag_db(), ph)).collect())
}

/// Nine-significant-digit formatting used by every CSV the toolkit writes.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let s = format!("{:.8e}", x);
    // 1.23450000e-1 -> 1.2345e-1
    match s.split_once('e') {
        Some((mant, exp)) => {
            let mant = if mant.contains('.') { mant.trim_end_matches('0').trim_end_matches('.') } else { mant };
            format!("{mant}e{exp}")
        }
        None => s,
    }
}

/// CSV text of a Bode table: header `freq_hz,mag_db,phase_deg`.
pub fn bode_csv(rows: &[(f64, f64, f64)]) -> String {
    let mut out = String::from("freq_hz,mag_db,phase_deg\n");
    for (f, m, p) in rows {
        out.push_str(&format!("{},{},{}\n", fmt_sig(*f), fmt_sig(*m), fmt_sig(*p)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn canonical_form_normalizes_den0() {
        let tf = TransferFunction::new(vec![2.0, 0.0], vec![2.0, 2.0, 0.0]).unwrap();
        assert_eq!(tf.num(), &[1.0]);
        assert_eq!(tf.den(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_denominator_rejected() {
        assert!(TransferFunction::new(vec![1.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn first_order_corner() {
        let tf = TransferFunction::new(vec![1.0], vec![1.0, 1.0]).unwrap();
        let p = tf.freq_response(&[1.0 / (2.0 * PI)]).unwrap()[0];
        assert_relative_eq!(p.value.re, 0.5, epsilon = 1e-12);
        assert_relative_eq!(p.value.im, -0.5, epsilon = 1e-12);
        assert_relative_eq!(p.value.norm(), 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(p.phase_deg(), -45.0, epsilon = 1e-9);
    }

    #[test]
    fn unity_response() {
        let p = TransferFunction::unity().freq_response(&[0.3, 7.0]).unwrap();
        assert!(p.iter().all(|p| p.value == C64::new(1.0, 0.0)));
    }

    #[test]
    fn pole_on_axis_reports_frequency() {
        let tf = TransferFunction::new(vec![1.0], vec![1.0, 0.0, 1.0]).unwrap();
        let err = tf.freq_response(&[1.0 / (2.0 * PI)]).unwrap_err();
        match err {
            Error::PoleOnAxis { freq_hz } => assert_relative_eq!(freq_hz, 1.0 / (2.0 * PI)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn nonpositive_frequency_rejected() {
        assert!(TransferFunction::unity().freq_response(&[0.0]).is_err());
    }

    #[test]
    fn series_identity_and_product() {
        let x = TransferFunction::new(vec![3.0, 1.0], vec![2.0, 5.0, 1.0]).unwrap();
        assert_eq!(TransferFunction::unity().series(&x), x);
        let a = TransferFunction::new(vec![1.0], vec![1.0, 1.0]).unwrap();
        let b = TransferFunction::new(vec![1.0], vec![2.0, 1.0]).unwrap();
        let ab = a.series(&b);
        let expect = TransferFunction::new(vec![1.0], vec![2.0, 3.0, 1.0]).unwrap();
        assert_eq!(ab, expect);
        assert_eq!(ab.num(), &[0.5]);
        assert_eq!(ab.den(), &[1.0, 1.5, 0.5]);
    }

    #[test]
    fn realization_first_order_and_static() {
        let ss = TransferFunction::new(vec![1.0], vec![1.0, 1.0]).unwrap().to_state_space().unwrap();
        assert_eq!(ss.a()[(0, 0)], -1.0);
        assert_eq!(ss.b()[(0, 0)], 1.0);
        assert_eq!(ss.c()[(0, 0)], 1.0);
        assert_eq!(ss.d()[(0, 0)], 0.0);
        let k = TransferFunction::gain(2.5).to_state_space().unwrap();
        assert_eq!(k.order(), 0);
        assert_eq!(k.d()[(0, 0)], 2.5);
    }

    #[test]
    fn improper_rejected_with_degrees() {
        let tf = TransferFunction::new(vec![0.0, 0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(tf.to_state_space().unwrap_err(), Error::Improper { num_degree: 2, den_degree: 1 });
    }

    #[test]
    fn phase_of_integrator_and_unity() {
        let integ = TransferFunction::new(vec![1.0], vec![0.0, 1.0]).unwrap();
        for w in [0.01, 1.0, 100.0] {
            assert_relative_eq!(integ.phase_at(w).unwrap(), -90.0, epsilon = 1e-9);
            assert_relative_eq!(TransferFunction::unity().phase_at(w).unwrap(), 0.0);
        }
    }

    #[test]
    fn phase_continues_past_180() {
        // Third-order lag reaches -270° at high frequency.
        let tf = TransferFunction::new(vec![1.0], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        let p = tf.phase_at(100.0).unwrap();
        let expect = -3.0 * 100f64.atan().to_degrees();
        assert_relative_eq!(p, expect, epsilon = 1e-9);
    }

    #[test]
    fn phase_of_negative_gain_and_origin_zero() {
        let neg = TransferFunction::gain(-2.0);
        assert_relative_eq!(neg.phase_at(1.0).unwrap(), 180.0);
        let diff = TransferFunction::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_relative_eq!(diff.phase_at(1.0).unwrap(), 45.0, epsilon = 1e-9);
    }

    #[test]
    fn unwrap_and_wrap() {
        let u = unwrap_deg(&[170.0, -170.0, -10.0, 170.0]);
        assert_eq!(u, vec![170.0, 190.0, 350.0, 170.0]);
        assert_eq!(wrap_deg(190.0), -170.0);
        assert_eq!(wrap_deg(-180.0), 180.0);
        assert_eq!(wrap_deg(540.0), 180.0);
    }

    #[test]
    fn logspace_endpoints_exact() {
        let g = logspace(0.1, 2.0, 7);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[6], 2.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bode_unity_rows() {
        let rows = bode_rows(&TransferFunction::unity(), &logspace(0.1, 2.0, 5)).unwrap();
        assert!(rows.iter().all(|r| r.1 == 0.0 && r.2 == 0.0));
        let csv = bode_csv(&rows);
        assert!(csv.starts_with("freq_hz,mag_db,phase_deg\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(fmt_sig(0.1), "1e-1");
        assert_eq!(fmt_sig(-45.0), "-4.5e1");
        assert_eq!(fmt_sig(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(fmt_sig(0.0), "0");
    }
}
