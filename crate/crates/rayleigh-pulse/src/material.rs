//! Isotropic elastic half-space material data and Rayleigh surface waves.
//!
//! All propagation-side quantities are expressed in units where the shear
//! speed is 1 (density is 1 throughout). The half-space is `{x2 >= 0}`, the
//! surface wave travels along `x1`, and depth profiles decay as `x2 -> inf`.

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// 2-vector of complex numbers (displacement components).
pub type V2 = [C; 2];
/// 2x2 complex matrix, row major.
pub type M2 = [[C; 2]; 2];
/// 4-vector of complex numbers (displacement + stress trace).
pub type V4 = [C; 4];
/// 4x4 complex matrix, row major.
pub type M4 = [[C; 4]; 4];

pub fn mat2_mul_vec(m: &M2, v: &V2) -> V2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub fn mat4_mul_vec(m: &M4, v: &V4) -> V4 {
    let mut out = [C::new(0.0, 0.0); 4];
    for (i, row) in m.iter().enumerate() {
        out[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
    }
    out
}

pub fn dot4(a: &V4, b: &V4) -> C {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

pub fn dot2(a: &V2, b: &V2) -> C {
    a[0] * b[0] + a[1] * b[1]
}

/// Lamé constants together with the derived wave speeds.
///
/// `r = c_p^2 / c_s^2 = (lambda + 2 mu) / mu > 1` is the only material
/// parameter the normalized theory depends on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaterialConstants {
    pub lambda: f64,
    pub mu: f64,
    pub c_s: f64,
    pub c_p: f64,
    pub r: f64,
}

/// Shear and pressure speeds for given Lamé constants (unit density).
pub fn wave_speeds(lambda: f64, mu: f64) -> Result<MaterialConstants> {
    if mu <= 0.0 || lambda + 2.0 * mu <= 0.0 {
        return Err(Error::Config(format!(
            "need mu > 0 and lambda + 2 mu > 0, got lambda = {lambda}, mu = {mu}"
        )));
    }
    let c_s = mu.sqrt();
    let c_p = (lambda + 2.0 * mu).sqrt();
    Ok(MaterialConstants { lambda, mu, c_s, c_p, r: (c_p / c_s).powi(2) })
}

/// Rayleigh-wave data in shear-speed units.
///
/// `c` is the Rayleigh speed divided by `c_s`; `om1` and `om2` are the decay
/// rates of the two evanescent components of the mode at unit tangential
/// frequency; `q = sqrt(om1 * om2)`; `tau = -c` is the time frequency of the
/// right-moving mode at unit tangential frequency; `c0` is the real constant
/// normalizing the amplitude equation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RayleighData {
    pub r: f64,
    pub c: f64,
    pub om1: f64,
    pub om2: f64,
    pub q: f64,
    pub tau: f64,
    pub c0: f64,
}

/// Secular function whose root in `(0, 1)` is the normalized Rayleigh speed.
///
/// `2 - c^2 - 2 ((1 - c^2)(1 - c^2/r))^{1/4}` is negative on `(0, c_R)` and
/// positive on `(c_R, 1)`.
fn rayleigh_secular(c: f64, r: f64) -> f64 {
    2.0 - c * c - 2.0 * ((1.0 - c * c) * (1.0 - c * c / r)).powf(0.25)
}

/// Solve for the Rayleigh speed and derived mode data by bisection.
pub fn solve_rayleigh(mat: &MaterialConstants) -> Result<RayleighData> {
    let r = mat.r;
    // The root always lies in (0.5, 1); at c near 0 the secular function is
    // below the ulp of 2, so start the bracket away from 0.
    let (mut lo, mut hi) = (0.1, 1.0 - 1e-15);
    if rayleigh_secular(lo, r) >= 0.0 || rayleigh_secular(hi, r) <= 0.0 {
        return Err(Error::Numerical(format!("Rayleigh bracket failed for r = {r}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rayleigh_secular(mid, r) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let c2 = c * c;
    let disp = (c2 / 2.0 - 1.0).powi(4) - (1.0 - c2) * (1.0 - c2 / r);
    if disp.abs() > 1e-12 {
        return Err(Error::Numerical(format!("Rayleigh dispersion residual {disp:e}")));
    }
    let om1 = (1.0 - c2).sqrt();
    let om2 = (1.0 - c2 / r).sqrt();
    let q = (om1 * om2).sqrt();
    let tau = -c;
    let mut data = RayleighData { r, c, om1, om2, q, tau, c0: 0.0 };
    data.c0 = compute_c0(&data)?;
    Ok(data)
}

/// Evanescent displacement profile `V(z)` of the right-moving unit-frequency
/// Rayleigh mode, normalized so its two exponential components carry the
/// coefficients used throughout the crate.
pub fn profile_v(ray: &RayleighData, z: f64) -> V2 {
    let (om1, om2) = (ray.om1, ray.om2);
    let a = [C::new(0.0, -2.0 * om1 * om2), C::new(2.0 * om2, 0.0)];
    let s = om1 * om1 + 1.0;
    let b = [C::new(0.0, s), C::new(-om2 * s, 0.0)];
    let e1 = (-om1 * z).exp();
    let e2 = (-om2 * z).exp();
    [a[0] * e1 + b[0] * e2, a[1] * e1 + b[1] * e2]
}

/// Surface-wave profile at tangential frequency `k != 0`: `V(|k| z)` for
/// `k > 0` and its conjugate for `k < 0`, so that real amplitudes produce
/// real displacements.
pub fn profile_rhat(ray: &RayleighData, k: f64, z: f64) -> V2 {
    let v = profile_v(ray, k.abs() * z);
    if k > 0.0 {
        v
    } else {
        [v[0].conj(), v[1].conj()]
    }
}

/// Elastic stiffness `c_{alpha j beta l}` at zero strain in shear units
/// (`mu = 1`, `lambda = r - 2`).
pub fn stiffness0(r: f64, al: usize, j: usize, be: usize, l: usize) -> f64 {
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    (r - 2.0) * d(al, j) * d(be, l) + d(al, be) * d(j, l) + d(al, l) * d(j, be)
}

/// Interior elastodynamic residual of the mode profile at depth `z`:
/// should vanish identically for the solved Rayleigh data.
pub fn profile_interior_residual(ray: &RayleighData, z: f64) -> f64 {
    let (om1, om2) = (ray.om1, ray.om2);
    let s = om1 * om1 + 1.0;
    // The two exponential components and their exact z-derivatives.
    let a = [C::new(0.0, -2.0 * om1 * om2), C::new(2.0 * om2, 0.0)];
    let b = [C::new(0.0, s), C::new(-om2 * s, 0.0)];
    let e1 = (-om1 * z).exp();
    let e2 = (-om2 * z).exp();
    let v0 = [a[0] * e1 + b[0] * e2, a[1] * e1 + b[1] * e2];
    let dv = [
        -om1 * a[0] * e1 - om2 * b[0] * e2,
        -om1 * a[1] * e1 - om2 * b[1] * e2,
    ];
    let d2v = [
        om1 * om1 * a[0] * e1 + om2 * om2 * b[0] * e2,
        om1 * om1 * a[1] * e1 + om2 * om2 * b[1] * e2,
    ];
    let tau2 = ray.tau * ray.tau;
    let mut worst = 0.0f64;
    for al in 0..2 {
        let mut res = -C::new(tau2, 0.0) * v0[al];
        for be in 0..2 {
            res += C::new(stiffness0(ray.r, al, 0, be, 0), 0.0) * v0[be];
            let mixed = stiffness0(ray.r, al, 0, be, 1) + stiffness0(ray.r, al, 1, be, 0);
            res -= C::new(0.0, mixed) * dv[be];
            res -= C::new(stiffness0(ray.r, al, 1, be, 1), 0.0) * d2v[be];
        }
        worst = worst.max(res.norm());
    }
    worst
}

/// Surface traction of the mode profile at `z = 0`; vanishes at the Rayleigh
/// speed.
pub fn profile_traction_residual(ray: &RayleighData) -> f64 {
    let (om1, om2) = (ray.om1, ray.om2);
    let v0 = profile_v(ray, 0.0);
    // dV/dz at z = 0, from the two exponential components.
    let s = om1 * om1 + 1.0;
    let dv0 = [
        C::new(0.0, -2.0 * om1 * om2) * (-om1) + C::new(0.0, s) * (-om2),
        C::new(2.0 * om2, 0.0) * (-om1) + C::new(-om2 * s, 0.0) * (-om2),
    ];
    let mut worst = 0.0f64;
    for al in 0..2 {
        let mut res = C::new(0.0, 0.0);
        for be in 0..2 {
            res += C::new(0.0, stiffness0(ray.r, al, 1, be, 0)) * v0[be];
            res += C::new(stiffness0(ray.r, al, 1, be, 1), 0.0) * dv0[be];
        }
        worst = worst.max(res.norm());
    }
    worst
}

/// Normalizing constant of the amplitude equation, in closed form.
///
/// Equals `-2 tau` times the squared `L^2(0, inf)` norm of `V`; positive for
/// the right-moving mode. `closed_form_c0` and `integral_c0` agree to
/// rounding; `compute_c0` cross-checks them.
pub fn closed_form_c0(ray: &RayleighData) -> f64 {
    let (om1, om2, tau) = (ray.om1, ray.om2, ray.tau);
    -4.0 * tau * (om2 - om1) * ((om2 / om1 - 1.0) + 2.0 * om1 * om2)
}

/// Same constant via the exact depth integral of `|V|^2`.
pub fn integral_c0(ray: &RayleighData) -> f64 {
    let (om1, om2, tau) = (ray.om1, ray.om2, ray.tau);
    let a = [C::new(0.0, -2.0 * om1 * om2), C::new(2.0 * om2, 0.0)];
    let s = om1 * om1 + 1.0;
    let b = [C::new(0.0, s), C::new(-om2 * s, 0.0)];
    let aa = a[0].norm_sqr() + a[1].norm_sqr();
    let bb = b[0].norm_sqr() + b[1].norm_sqr();
    let ab = (a[0] * b[0].conj() + a[1] * b[1].conj()).re;
    let integral = aa / (2.0 * om1) + 2.0 * ab / (om1 + om2) + bb / (2.0 * om2);
    -2.0 * tau * integral
}

/// Closed form and integral form of `c0`, checked against each other.
pub fn compute_c0(ray: &RayleighData) -> Result<f64> {
    let cf = closed_form_c0(ray);
    let qi = integral_c0(ray);
    if (cf - qi).abs() > 1e-10 * cf.abs().max(1.0) {
        return Err(Error::Invariant(format!("c0 forms disagree: {cf} vs {qi}")));
    }
    Ok(cf)
}

/// Group velocity of the surface wave: `c * sign(k)` along `x1` (the mode is
/// non-dispersive).
pub fn group_velocity(ray: &RayleighData, k: f64) -> f64 {
    ray.c * k.signum()
}

/// Modal frame of the first-order boundary-value problem in the scaled
/// variables: complex decay roots, eigenvectors of the depth ODE, the dual
/// frame, and the rank-one surface operator with its kernel and cokernel.
///
/// Roots are `om[0] = i om1`, `om[1] = i om2` (upper half plane) and their
/// negatives; eigenvectors `r1..r4` span the displacement part.
#[derive(Debug, Clone)]
pub struct ModalData {
    pub r: f64,
    pub c: f64,
    /// Complex roots `omega_1 .. omega_4`; the depth dependence of channel
    /// `j` is `exp(i k omega_j z)`.
    pub om: [C; 4],
    /// Displacement eigenvectors `r_1 .. r_4`.
    pub rvec: [V2; 4],
    /// Rank-one surface operator acting on the trace coefficients of the
    /// decaying channels (multiplied by `i k` in the boundary condition).
    pub b_lop: M2,
    /// Kernel vector of `b_lop`.
    pub ker: V2,
    /// Cokernel (left null) vector of `b_lop`.
    pub coker: V2,
    /// `q` with `q^2 = -om[0] om[1]` and `2 - c^2 = 2 q`.
    pub q: f64,
}

impl ModalData {
    /// Four-component eigenvector `R_j(k) = (r_j, i k om_j r_j)`.
    pub fn big_r(&self, j: usize, k: f64) -> V4 {
        let ik = C::new(0.0, k);
        let w = self.om[j];
        let r = self.rvec[j];
        [r[0], r[1], ik * w * r[0], ik * w * r[1]]
    }

    /// Dual frame vector `L_j(k)` with `L_m(k) . R_n(k) = delta_{mn}`.
    pub fn big_l(&self, j: usize, k: f64) -> V4 {
        let (r, c) = (self.r, self.c);
        let c2 = c * c;
        let ik = C::new(0.0, k);
        let om1 = self.om[0];
        let om2 = self.om[1];
        match j {
            0 => {
                let d = C::new(0.0, -2.0 * c2 * k) * om1;
                [
                    -ik * (r - c2) / d,
                    -ik * om1 / d,
                    om1 / d,
                    C::new(-r, 0.0) / d,
                ]
            }
            1 => {
                let d = C::new(0.0, 2.0 * c2 * k) * om2;
                [
                    ik * om2 * r / d,
                    ik * (c2 - 1.0) / d,
                    C::new(1.0, 0.0) / d,
                    r * om2 / d,
                ]
            }
            2 => {
                let l = self.big_l(0, -k);
                [l[0].conj(), l[1].conj(), l[2].conj(), l[3].conj()]
            }
            3 => {
                let l = self.big_l(1, -k);
                [l[0].conj(), l[1].conj(), l[2].conj(), l[3].conj()]
            }
            _ => panic!("modal index out of range"),
        }
    }

    /// Forcing projection: `ell_j(k) . f` is the `j`-component of the
    /// right-hand side `(0, -diag(1, r)^{-1} f)` in the dual frame.
    pub fn ell(&self, j: usize, k: f64) -> V2 {
        let l = self.big_l(j, k);
        [-l[2], -l[3] / self.r]
    }

    /// First-order depth ODE matrix `G(k)`: `dU/dz = G U` for homogeneous
    /// solutions, with `U = (u, du/dz)`.
    pub fn ode_matrix(&self, k: f64) -> M4 {
        let (r, c) = (self.r, self.c);
        let c2 = c * c;
        let z = C::new(0.0, 0.0);
        let one = C::new(1.0, 0.0);
        let k2 = k * k;
        let ik = C::new(0.0, k);
        [
            [z, z, one, z],
            [z, z, z, one],
            [C::new(k2 * (r - c2), 0.0), z, z, ik * (1.0 - r)],
            [z, C::new(k2 * (1.0 - c2) / r, 0.0), ik * (1.0 / r - 1.0), z],
        ]
    }

    /// Traction operator `C(k)` on 4-vectors `U = (u, du/dz)`: the surface
    /// condition is `C(k) U(0) = g`.
    pub fn traction_matrix(&self, k: f64) -> [[C; 4]; 2] {
        let r = self.r;
        let ik = C::new(0.0, k);
        let z = C::new(0.0, 0.0);
        [
            [z, ik, C::new(1.0, 0.0), z],
            [ik * (r - 2.0), z, z, C::new(r, 0.0)],
        ]
    }
}

/// Build the modal frame from solved Rayleigh data.
pub fn modal_frame(ray: &RayleighData) -> ModalData {
    let c = ray.c;
    let c2 = c * c;
    let om1 = C::new(0.0, ray.om1);
    let om2 = C::new(0.0, ray.om2);
    let q = ray.q;
    let rvec = [
        [-om1, C::new(1.0, 0.0)],
        [C::new(1.0, 0.0), om2],
        [om1, C::new(1.0, 0.0)],
        [C::new(1.0, 0.0), -om2],
    ];
    let b_lop = [
        [C::new(2.0 - c2, 0.0), 2.0 * om2],
        [2.0 * om1, C::new(c2 - 2.0, 0.0)],
    ];
    let ker = [om2, C::new(-q, 0.0)];
    let coker = [C::new(q, 0.0), om2];
    ModalData { r: ray.r, c, om: [om1, om2, -om1, -om2], rvec, b_lop, ker, coker, q }
}
