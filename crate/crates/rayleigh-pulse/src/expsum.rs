//! Exact arithmetic on finite sums `sum_i c_i z^{p_i} exp(mu_i z)`.
//!
//! Depth profiles in this crate are closed under products, differentiation,
//! half-line integration and resolution of first-order ODEs, so every depth
//! integral is evaluated in closed form. Numerical quadrature appears only in
//! tests, as an independent oracle.

use num_complex::Complex64 as C;

use crate::{Error, Result};

/// One term `coeff * z^power * exp(rate * z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpTerm {
    pub coeff: C,
    pub rate: C,
    pub power: u32,
}

/// Finite sum of exponential terms in the depth variable `z >= 0`.
#[derive(Debug, Clone, Default)]
pub struct ExponentialSum {
    pub terms: Vec<ExpTerm>,
}

/// Relative threshold under which two rates are considered resonant.
const RESONANCE_TOL: f64 = 1e-9;

impl ExponentialSum {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn term(coeff: C, rate: C, power: u32) -> Self {
        Self { terms: vec![ExpTerm { coeff, rate, power }] }
    }

    pub fn push(&mut self, coeff: C, rate: C, power: u32) {
        if coeff != C::new(0.0, 0.0) {
            self.terms.push(ExpTerm { coeff, rate, power });
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self { terms }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.terms.extend_from_slice(&other.terms);
    }

    pub fn scale(&self, s: C) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| ExpTerm { coeff: t.coeff * s, ..*t })
                .collect(),
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                out.push(ExpTerm {
                    coeff: a.coeff * b.coeff,
                    rate: a.rate + b.rate,
                    power: a.power + b.power,
                });
            }
        }
        Self { terms: out }
    }

    /// Merge terms with equal (rate, power); drops negligible coefficients.
    pub fn compress(&mut self) {
        let scale: f64 = self.terms.iter().map(|t| t.coeff.norm()).sum::<f64>().max(1e-300);
        let mut merged: Vec<ExpTerm> = Vec::with_capacity(self.terms.len());
        'outer: for t in &self.terms {
            for m in merged.iter_mut() {
                if m.power == t.power && (m.rate - t.rate).norm() < 1e-14 * (1.0 + m.rate.norm()) {
                    m.coeff += t.coeff;
                    continue 'outer;
                }
            }
            merged.push(*t);
        }
        merged.retain(|t| t.coeff.norm() > 1e-16 * scale);
        self.terms = merged;
    }

    pub fn eval(&self, z: f64) -> C {
        let mut s = C::new(0.0, 0.0);
        for t in &self.terms {
            s += t.coeff * z.powi(t.power as i32) * (t.rate * z).exp();
        }
        s
    }

    /// Derivative in `z`, again an exponential sum.
    pub fn derivative(&self) -> Self {
        let mut out = Vec::with_capacity(2 * self.terms.len());
        for t in &self.terms {
            out.push(ExpTerm { coeff: t.coeff * t.rate, rate: t.rate, power: t.power });
            if t.power > 0 {
                out.push(ExpTerm {
                    coeff: t.coeff * t.power as f64,
                    rate: t.rate,
                    power: t.power - 1,
                });
            }
        }
        Self { terms: out }
    }

    /// Exact `int_0^inf z^p exp(mu z) dz = p! / (-mu)^{p+1}`; requires every
    /// rate to have negative real part.
    pub fn integrate_half_line(&self) -> Result<C> {
        let mut s = C::new(0.0, 0.0);
        for t in &self.terms {
            if t.rate.re >= 0.0 {
                return Err(Error::Numerical(format!(
                    "non-decaying term (rate {}) in half-line integral",
                    t.rate
                )));
            }
            let mut fact = 1.0;
            for i in 2..=t.power {
                fact *= i as f64;
            }
            s += t.coeff * fact / (-t.rate).powu(t.power + 1);
        }
        Ok(s)
    }

    /// Solve `(d/dz - a) tau = self` with a prescribed integration endpoint.
    ///
    /// `from_zero = true` returns `int_0^z exp(a (z - s)) f(s) ds`;
    /// `from_zero = false` returns `int_inf^z`, the unique particular
    /// solution with no free exponential, valid when each forcing rate
    /// satisfies `Re(mu - a) < 0`. Resonant terms (`mu = a`) produce the
    /// secular branch `z^{p+1}` and are only admissible from zero.
    pub fn solve_first_order(&self, a: C, from_zero: bool) -> Result<Self> {
        let mut out = ExponentialSum::zero();
        let mut homog = C::new(0.0, 0.0);
        for t in &self.terms {
            let d = t.rate - a;
            if d.norm() < RESONANCE_TOL * (1.0 + t.rate.norm() + a.norm()) {
                if !from_zero {
                    return Err(Error::Numerical(
                        "resonant forcing in a decaying-channel integral".into(),
                    ));
                }
                out.push(t.coeff / (t.power as f64 + 1.0), a, t.power + 1);
                continue;
            }
            // Particular solution by repeated integration by parts:
            // sum_{j=0..p} (-1)^j p!/(p-j)! c / d^{j+1} z^{p-j} exp(mu z).
            let mut fall = 1.0; // p! / (p - j)!
            let mut dpow = d;
            let mut sign = 1.0;
            for j in 0..=t.power {
                let coeff = sign * fall * t.coeff / dpow;
                out.push(coeff, t.rate, t.power - j);
                if t.power - j == 0 {
                    if from_zero {
                        homog -= coeff;
                    }
                } else {
                    fall *= (t.power - j) as f64;
                }
                dpow *= d;
                sign = -sign;
            }
        }
        if from_zero && homog != C::new(0.0, 0.0) {
            out.push(homog, a, 0);
        }
        out.compress();
        Ok(out)
    }

    /// Largest `|f(z)|` over a sample grid on `[0, z_max]`.
    pub fn sup_on_grid(&self, z_max: f64, n: usize) -> f64 {
        (0..=n)
            .map(|i| self.eval(z_max * i as f64 / n as f64).norm())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson<F: Fn(f64) -> C>(f: F, a: f64, b: f64, n: usize) -> C {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn product_and_eval() {
        let f = ExponentialSum::term(C::new(2.0, 0.0), C::new(-1.0, 0.5), 0);
        let g = ExponentialSum::term(C::new(0.0, 1.0), C::new(-0.3, -0.2), 1);
        let fg = f.mul(&g);
        let z = 0.7;
        assert!((fg.eval(z) - f.eval(z) * g.eval(z)).norm() < 1e-14);
    }

    #[test]
    fn half_line_integral_matches_quadrature() {
        let mut f = ExponentialSum::term(C::new(1.0, -0.4), C::new(-0.9, 1.3), 0);
        f.push(C::new(-0.2, 0.8), C::new(-0.5, -2.0), 1);
        let exact = f.integrate_half_line().unwrap();
        let quad = simpson(|z| f.eval(z), 0.0, 80.0, 40000);
        assert!((exact - quad).norm() < 1e-10);
    }

    #[test]
    fn half_line_integral_rejects_growth() {
        let f = ExponentialSum::term(C::new(1.0, 0.0), C::new(0.1, 0.0), 0);
        assert!(f.integrate_half_line().is_err());
    }

    #[test]
    fn first_order_solution_from_zero() {
        let a = C::new(0.0, 1.7);
        let mut f = ExponentialSum::term(C::new(1.0, 2.0), C::new(-0.6, 0.4), 1);
        f.push(C::new(0.5, -1.0), C::new(-0.2, -0.8), 0);
        let tau = f.solve_first_order(a, true).unwrap();
        // ODE residual and initial condition.
        let dtau = tau.derivative();
        for z in [0.0, 0.31, 1.2, 3.0] {
            let res = dtau.eval(z) - a * tau.eval(z) - f.eval(z);
            assert!(res.norm() < 1e-12, "residual {res} at z = {z}");
        }
        assert!(tau.eval(0.0).norm() < 1e-13);
    }

    #[test]
    fn first_order_solution_from_infinity() {
        let a = C::new(0.0, -0.9);
        let f = ExponentialSum::term(C::new(0.3, 0.1), C::new(-0.4, 2.0), 1);
        let tau = f.solve_first_order(a, false).unwrap();
        let dtau = tau.derivative();
        for z in [0.1, 1.0, 4.0] {
            let res = dtau.eval(z) - a * tau.eval(z) - f.eval(z);
            assert!(res.norm() < 1e-12);
        }
        // Direct comparison with the defining integral, truncated far out.
        let z = 1.3;
        let quad = simpson(
            |s| (a * (z - s)).exp() * f.eval(s),
            60.0,
            z,
            60000,
        );
        assert!((tau.eval(z) - quad).norm() < 1e-8);
    }

    #[test]
    fn secular_branch() {
        let a = C::new(0.0, 1.1);
        let f = ExponentialSum::term(C::new(1.0, 0.0), a, 0);
        let tau = f.solve_first_order(a, true).unwrap();
        assert_eq!(tau.terms.len(), 1);
        assert_eq!(tau.terms[0].power, 1);
        let dtau = tau.derivative();
        for z in [0.2, 1.5] {
            assert!((dtau.eval(z) - a * tau.eval(z) - f.eval(z)).norm() < 1e-12);
        }
        assert!(f.solve_first_order(a, false).is_err());
    }
}
