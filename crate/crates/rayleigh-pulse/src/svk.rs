//! Hyperelastic constitutive algebra in two dimensions.
//!
//! The stored energy of a Saint Venant-Kirchhoff material is quadratic in
//! the Green-Saint Venant strain, hence an exact quartic polynomial in the
//! four entries of the displacement gradient. This module represents that
//! polynomial (optionally with cubic-invariant overrides) exactly and
//! generates every derived object by polynomial differentiation: the
//! stress, the gradient-dependent stiffness tensor, the interior
//! coefficient matrices with their constant/linear/quadratic split, and the
//! surface traction with its linear/quadratic/cubic split. Nothing is
//! hand-transcribed, which removes transcription risk across sign
//! conventions and lets finite differences of the energy serve as an
//! independent oracle.

use crate::kernels::CubicCoefficients;
use crate::material::{wave_speeds, MaterialConstants};
use crate::Result;

/// Number of scalar variables: the entries of a 2x2 displacement gradient,
/// flattened as `v[2 * row + col]`, i.e. `v11, v12, v21, v22`.
pub const NV: usize = 4;
/// Maximum exponent per variable (the energy is quartic overall).
const MAX_EXP: usize = 4;
const BASE: usize = MAX_EXP + 1;
const NCOEF: usize = BASE * BASE * BASE * BASE;

/// Dense polynomial in the four gradient entries, degree at most four.
#[derive(Clone)]
pub struct Poly4 {
    c: Box<[f64; NCOEF]>,
}

fn idx(e: [usize; NV]) -> usize {
    ((e[0] * BASE + e[1]) * BASE + e[2]) * BASE + e[3]
}

fn exps(mut i: usize) -> [usize; NV] {
    let e3 = i % BASE;
    i /= BASE;
    let e2 = i % BASE;
    i /= BASE;
    let e1 = i % BASE;
    [i / BASE, e1, e2, e3]
}

impl Poly4 {
    pub fn zero() -> Self {
        Self { c: Box::new([0.0; NCOEF]) }
    }

    pub fn constant(a: f64) -> Self {
        let mut p = Self::zero();
        p.c[0] = a;
        p
    }

    /// The monomial `v[i]`.
    pub fn var(i: usize) -> Self {
        let mut e = [0usize; NV];
        e[i] = 1;
        let mut p = Self::zero();
        p.c[idx(e)] = 1.0;
        p
    }

    pub fn coeff(&self, e: [usize; NV]) -> f64 {
        self.c[idx(e)]
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (a, b) in out.c.iter_mut().zip(other.c.iter()) {
            *a += *b;
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.c.iter_mut().zip(other.c.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for a in out.c.iter_mut() {
            *a *= s;
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero();
        for i in 0..NCOEF {
            let a = self.c[i];
            if a == 0.0 {
                continue;
            }
            let ea = exps(i);
            for j in 0..NCOEF {
                let b = other.c[j];
                if b == 0.0 {
                    continue;
                }
                let eb = exps(j);
                let e = [ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2], ea[3] + eb[3]];
                assert!(
                    e.iter().all(|x| *x <= MAX_EXP),
                    "polynomial degree overflow in constitutive algebra"
                );
                out.c[idx(e)] += a * b;
            }
        }
        out
    }

    /// Partial derivative with respect to `v[i]`.
    pub fn diff(&self, i: usize) -> Self {
        let mut out = Self::zero();
        for j in 0..NCOEF {
            let a = self.c[j];
            if a == 0.0 {
                continue;
            }
            let mut e = exps(j);
            if e[i] == 0 {
                continue;
            }
            let n = e[i] as f64;
            e[i] -= 1;
            out.c[idx(e)] += a * n;
        }
        out
    }

    pub fn eval(&self, v: [f64; NV]) -> f64 {
        let mut pows = [[0.0f64; BASE]; NV];
        for (i, p) in pows.iter_mut().enumerate() {
            p[0] = 1.0;
            for j in 1..BASE {
                p[j] = p[j - 1] * v[i];
            }
        }
        let mut s = 0.0;
        for j in 0..NCOEF {
            let a = self.c[j];
            if a == 0.0 {
                continue;
            }
            let e = exps(j);
            s += a * pows[0][e[0]] * pows[1][e[1]] * pows[2][e[2]] * pows[3][e[3]];
        }
        s
    }

    /// The homogeneous part of total degree `d`.
    pub fn degree_part(&self, d: usize) -> Self {
        let mut out = Self::zero();
        for j in 0..NCOEF {
            if self.c[j] != 0.0 && exps(j).iter().sum::<usize>() == d {
                out.c[j] = self.c[j];
            }
        }
        out
    }

    pub fn max_degree(&self) -> usize {
        (0..NCOEF)
            .filter(|j| self.c[*j] != 0.0)
            .map(|j| exps(j).iter().sum())
            .max()
            .unwrap_or(0)
    }

    pub fn max_abs_coeff_diff(&self, other: &Self) -> f64 {
        self.c
            .iter()
            .zip(other.c.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Cubic gradient invariants spanning the isotropic third-order terms:
/// `(tr v)^3`, `tr v * |v + v^T|^2`, `tr(v v^T v)`, `tr(v^3)`.
pub fn cubic_invariants() -> [Poly4; 4] {
    let v = |a: usize, b: usize| Poly4::var(2 * a + b);
    let tr = v(0, 0).add(&v(1, 1));
    // |v + v^T|^2 = sum over entries of (v_ab + v_ba)^2.
    let mut sym2 = Poly4::zero();
    for a in 0..2 {
        for b in 0..2 {
            let s = v(a, b).add(&v(b, a));
            sym2.add_assign(&s.mul(&s));
        }
    }
    // tr(v v^T v) and tr(v^3) by explicit index sums.
    let mut t3 = Poly4::zero();
    let mut t4 = Poly4::zero();
    for a in 0..2 {
        for b in 0..2 {
            for g in 0..2 {
                t3.add_assign(&v(a, b).mul(&v(g, b)).mul(&v(g, a)));
                t4.add_assign(&v(a, b).mul(&v(b, g)).mul(&v(g, a)));
            }
        }
    }
    [tr.mul(&tr).mul(&tr), tr.mul(&sym2), t3, t4]
}

/// Constitutive model generated from a stored-energy polynomial.
///
/// Everything is expressed in shear units (`mu = 1` after normalization) or
/// raw units depending on the constructor; the three interior coefficient
/// matrices act on second derivatives ordered as
/// `(d_11, d_12, d_22)` (multi-indices `(2,0), (1,1), (0,2)`).
pub struct SVKModel {
    pub mc: MaterialConstants,
    pub lambda: f64,
    pub mu: f64,
    /// Cubic coefficients of the energy in the invariant basis recorded for
    /// interaction-kernel work (they reproduce the exact third derivative
    /// under the evanescent-mode contraction).
    pub cc: CubicCoefficients,
    /// Stored energy `W(v)`.
    pub w: Poly4,
    /// Stress `dW/dv_{alpha j}`, indexed `[alpha][j]`.
    pub dw: [[Poly4; 2]; 2],
    /// Gradient-dependent stiffness `c_{alpha j beta l}(v)`, quadratic.
    pub stiff: [[[[Poly4; 2]; 2]; 2]; 2],
}

fn energy_polynomial(lambda: f64, mu: f64, delta_beta: [f64; 4]) -> Poly4 {
    let v = |a: usize, b: usize| Poly4::var(2 * a + b);
    // Strain e = (v + v^T + v v^T) / 2, an exact quadratic matrix polynomial.
    let mut e = [[Poly4::zero(), Poly4::zero()], [Poly4::zero(), Poly4::zero()]];
    for (a, row) in e.iter_mut().enumerate() {
        for (b, entry) in row.iter_mut().enumerate() {
            let mut s = v(a, b).add(&v(b, a));
            for g in 0..2 {
                s.add_assign(&v(a, g).mul(&v(b, g)));
            }
            *entry = s.scale(0.5);
        }
    }
    let tre = e[0][0].add(&e[1][1]);
    let mut tre2 = Poly4::zero();
    for a in 0..2 {
        for b in 0..2 {
            tre2.add_assign(&e[a][b].mul(&e[b][a]));
        }
    }
    let mut w = tre.mul(&tre).scale(0.5 * lambda);
    w.add_assign(&tre2.scale(mu));
    let inv = cubic_invariants();
    for (db, t) in delta_beta.iter().zip(inv.iter()) {
        if *db != 0.0 {
            w.add_assign(&t.scale(*db));
        }
    }
    w
}

impl SVKModel {
    /// Model from the quadratic-in-strain energy with the given Lamé
    /// constants (raw units).
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        Self::with_cubic(lambda, mu, CubicCoefficients::svk(lambda, mu))
    }

    /// Model whose cubic gradient invariants are overridden relative to the
    /// quadratic-in-strain baseline (the quartic closure is kept).
    pub fn with_cubic(lambda: f64, mu: f64, cc: CubicCoefficients) -> Result<Self> {
        let mc = wave_speeds(lambda, mu)?;
        Ok(Self::build(mc, lambda, mu, cc))
    }

    /// Shear-normalized model for the wave-operator work: `mu = 1`,
    /// `lambda = r - 2` in units where the shear speed is one.
    pub fn svk_tensors(mc: &MaterialConstants) -> Self {
        let lambda = mc.r - 2.0;
        Self::build(*mc, lambda, 1.0, CubicCoefficients::svk(lambda, 1.0))
    }

    fn build(mc: MaterialConstants, lambda: f64, mu: f64, cc: CubicCoefficients) -> Self {
        let base = CubicCoefficients::svk(lambda, mu).beta;
        let delta = [
            cc.beta[0] - base[0],
            cc.beta[1] - base[1],
            cc.beta[2] - base[2],
            cc.beta[3] - base[3],
        ];
        let w = energy_polynomial(lambda, mu, delta);
        let dw = std::array::from_fn(|a| std::array::from_fn(|j| w.diff(2 * a + j)));
        let dwr = &dw;
        let stiff = std::array::from_fn(|a| {
            std::array::from_fn(|j| {
                std::array::from_fn(|b| std::array::from_fn(|l| dwr[a][j].diff(2 * b + l)))
            })
        });
        Self { mc, lambda, mu, cc, w, dw, stiff }
    }

    /// Stiffness entry at a gradient value.
    pub fn c_at(&self, v: [f64; NV], al: usize, j: usize, be: usize, l: usize) -> f64 {
        self.stiff[al][j][be][l].eval(v)
    }

    /// Interior coefficient matrix `A_alpha(v)` for multi-index slot
    /// `0 -> (2,0), 1 -> (1,1), 2 -> (0,2)`, as a 2x2 polynomial matrix.
    fn a_poly(&self, slot: usize, a: usize, b: usize) -> Poly4 {
        match slot {
            0 => self.stiff[a][0][b][0].scale(-1.0),
            1 => self.stiff[a][0][b][1].add(&self.stiff[a][1][b][0]).scale(-1.0),
            2 => self.stiff[a][1][b][1].scale(-1.0),
            _ => panic!("multi-index slot out of range"),
        }
    }

    /// Full `A_alpha(v)` evaluated at a gradient.
    pub fn a_matrix(&self, slot: usize, v: [f64; NV]) -> [[f64; 2]; 2] {
        std::array::from_fn(|a| std::array::from_fn(|b| self.a_poly(slot, a, b).eval(v)))
    }

    /// Constant part `A_alpha(0)`.
    pub fn a0(&self, slot: usize) -> [[f64; 2]; 2] {
        std::array::from_fn(|a| {
            std::array::from_fn(|b| self.a_poly(slot, a, b).degree_part(0).eval([0.0; 4]))
        })
    }

    /// Linear part `L_alpha(v)`.
    pub fn l_alpha(&self, slot: usize, v: [f64; NV]) -> [[f64; 2]; 2] {
        std::array::from_fn(|a| {
            std::array::from_fn(|b| self.a_poly(slot, a, b).degree_part(1).eval(v))
        })
    }

    /// Coefficients of the linear part: `L_alpha(v)[a][b] = sum_e c_e v_e`.
    pub fn l_alpha_coeff(&self, slot: usize, a: usize, b: usize) -> [f64; NV] {
        let p = self.a_poly(slot, a, b).degree_part(1);
        std::array::from_fn(|e| {
            let mut ex = [0usize; NV];
            ex[e] = 1;
            p.coeff(ex)
        })
    }

    /// Quadratic part `Q_alpha(v)`.
    pub fn q_alpha(&self, slot: usize, v: [f64; NV]) -> [[f64; 2]; 2] {
        std::array::from_fn(|a| {
            std::array::from_fn(|b| self.a_poly(slot, a, b).degree_part(2).eval(v))
        })
    }

    /// Surface traction `h_alpha(v) = dW/dv_{alpha 2}` (outward data on the
    /// depth face), a cubic polynomial vanishing at zero.
    pub fn h(&self, v: [f64; NV]) -> [f64; 2] {
        [self.dw[0][1].eval(v), self.dw[1][1].eval(v)]
    }

    /// Linear part of the traction.
    pub fn h_lin(&self, v: [f64; NV]) -> [f64; 2] {
        [self.dw[0][1].degree_part(1).eval(v), self.dw[1][1].degree_part(1).eval(v)]
    }

    /// Coefficient matrices of the linear traction: `h_lin(v)[a] =
    /// (M_0 v_{.0} + M_1 v_{.1})[a]` with `M_l[a][b]` returned for face `l`.
    pub fn h_lin_matrix(&self, l: usize) -> [[f64; 2]; 2] {
        std::array::from_fn(|a| {
            std::array::from_fn(|b| {
                let mut ex = [0usize; NV];
                ex[2 * b + l] = 1;
                self.dw[a][1].degree_part(1).coeff(ex)
            })
        })
    }

    /// Quadratic part of the traction.
    pub fn h_quad(&self, v: [f64; NV]) -> [f64; 2] {
        [self.dw[0][1].degree_part(2).eval(v), self.dw[1][1].degree_part(2).eval(v)]
    }

    /// Symmetric coefficient tensor of the quadratic traction:
    /// `h_quad(v)[a] = sum_{e,f} t[a][e][f] v_e v_f` with `t[a]` symmetric.
    pub fn h_quad_tensor(&self, a: usize) -> [[f64; NV]; NV] {
        let p = self.dw[a][1].degree_part(2);
        let mut t = [[0.0f64; NV]; NV];
        for e in 0..NV {
            for f in e..NV {
                let mut ex = [0usize; NV];
                ex[e] += 1;
                ex[f] += 1;
                let c = p.coeff(ex);
                if e == f {
                    t[e][f] = c;
                } else {
                    t[e][f] = 0.5 * c;
                    t[f][e] = 0.5 * c;
                }
            }
        }
        t
    }

    /// Cubic part of the traction.
    pub fn h_cubic(&self, v: [f64; NV]) -> [f64; 2] {
        [self.dw[0][1].degree_part(3).eval(v), self.dw[1][1].degree_part(3).eval(v)]
    }
}
