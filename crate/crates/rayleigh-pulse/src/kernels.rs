//! The bilinear kernel of the amplitude equation.
//!
//! The quadratic self-interaction of a surface-wave amplitude is a bilinear
//! Fourier multiplier whose kernel `b(xi1, xi2, xi3)` is a depth integral of
//! a product of three evanescent mode factors, contracted against the third
//! derivatives of the elastic stored energy at zero strain. On the resonant
//! set `xi1 + xi2 + xi3 = 0` the kernel collapses to a real linear
//! combination of three canonical rational kernels.
//!
//! All depth integrals are exact ([`crate::expsum`]); quadrature appears only
//! in tests as an oracle.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::expsum::ExponentialSum;
use crate::material::RayleighData;
use crate::{Error, Result};

/// Coefficients `beta_1 .. beta_4` of the cubic part of the stored energy,
/// in the invariant basis `(tr E)^3`, `tr E tr(E^2)`, `tr(E^3)` plus the
/// genuinely third-order term; a Saint Venant-Kirchhoff material has
/// `beta = (0, lambda/2, mu, 0)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CubicCoefficients {
    pub beta: [f64; 4],
}

impl CubicCoefficients {
    /// Cubic energy coefficients of the Saint Venant-Kirchhoff material.
    pub fn svk(lambda: f64, mu: f64) -> Self {
        Self { beta: [0.0, lambda / 2.0, mu, 0.0] }
    }

    /// Coefficients rescaled to shear units (`mu = 1`).
    pub fn normalized(&self, mu: f64) -> [f64; 4] {
        [self.beta[0] / mu, self.beta[1] / mu, self.beta[2] / mu, self.beta[3] / mu]
    }
}

/// The four depth profiles entering the mode factors, at tangential
/// frequency `xi != 0`. Order: `T11, Td1, T1d, Tdd`.
pub fn t_profiles(ray: &RayleighData, xi: f64) -> [ExponentialSum; 4] {
    let (om1, om2) = (ray.om1, ray.om2);
    let a = xi.abs();
    let r1 = C::new(-om1 * a, 0.0);
    let r2 = C::new(-om2 * a, 0.0);
    let s = om1 * om1 + 1.0;
    let mk = |c1: f64, c2: f64| {
        let mut e = ExponentialSum::term(C::new(c1, 0.0), r1, 0);
        e.push(C::new(c2, 0.0), r2, 0);
        e
    };
    [
        mk(2.0 * om1 * om2, -s),
        mk(2.0, -s),
        mk(2.0 * om1 * om1, -s),
        mk(2.0 * om1, -om2 * s),
    ]
}

/// Mode factor `K_{alpha j}(xi, z)`: the `(alpha, j)` derivative combination
/// of the evanescent profile at frequency `xi`. Valid for either sign of
/// `xi`; zero frequency gives the zero sum.
pub fn factor(ray: &RayleighData, alpha: usize, j: usize, xi: f64) -> ExponentialSum {
    if xi == 0.0 {
        return ExponentialSum::zero();
    }
    let t = t_profiles(ray, xi);
    let om2 = ray.om2;
    let (scale, profile) = match (alpha, j) {
        (0, 0) => (C::new(xi.abs(), 0.0), &t[0]),
        (1, 0) => (C::new(0.0, xi * om2), &t[1]),
        (0, 1) => (C::new(0.0, xi * om2), &t[2]),
        (1, 1) => (C::new(-xi.abs() * om2, 0.0), &t[3]),
        _ => panic!("factor index out of range"),
    };
    profile.scale(scale)
}

/// Kronecker-delta contraction patterns of the four elementary third-order
/// energy derivatives, for index pairs `(alpha, j), (beta, l), (gamma, m)`.
pub fn delta_coefficient(kind: usize, idx: [usize; 6]) -> f64 {
    let [al, j, be, l, ga, m] = idx;
    let d = |a: usize, b: usize| (a == b) as u32 as f64;
    match kind {
        1 => d(al, j) * d(be, l) * d(ga, m),
        2 => {
            d(al, j) * d(be, ga) * d(l, m)
                + d(be, l) * d(al, ga) * d(j, m)
                + d(ga, m) * d(al, be) * d(j, l)
        }
        3 => {
            d(al, be) * (d(ga, j) * d(l, m) + d(ga, l) * d(j, m))
                + d(al, ga) * (d(be, j) * d(l, m) + d(be, m) * d(j, l))
                + d(be, ga) * (d(al, l) * d(j, m) + d(al, m) * d(j, l))
        }
        4 => d(al, l) * d(be, m) * d(ga, j) + d(al, m) * d(be, j) * d(ga, l),
        _ => panic!("kernel kind out of range"),
    }
}

/// One elementary kernel `b^kind(xi1, xi2, xi3)` by exact depth integration.
pub fn elementary_kernel(ray: &RayleighData, kind: usize, xi: [f64; 3]) -> Result<C> {
    if xi.iter().any(|x| *x == 0.0) {
        return Ok(C::new(0.0, 0.0));
    }
    let f1: Vec<ExponentialSum> =
        (0..4).map(|i| factor(ray, i / 2, i % 2, xi[0])).collect();
    let f2: Vec<ExponentialSum> =
        (0..4).map(|i| factor(ray, i / 2, i % 2, xi[1])).collect();
    let f3: Vec<ExponentialSum> =
        (0..4).map(|i| factor(ray, i / 2, i % 2, xi[2])).collect();
    let mut total = C::new(0.0, 0.0);
    for al in 0..2 {
        for j in 0..2 {
            for be in 0..2 {
                for l in 0..2 {
                    for ga in 0..2 {
                        for m in 0..2 {
                            let d = delta_coefficient(kind, [al, j, be, l, ga, m]);
                            if d == 0.0 {
                                continue;
                            }
                            let prod = f1[2 * al + j].mul(&f2[2 * be + l]).mul(&f3[2 * ga + m]);
                            total += d * prod.integrate_half_line()?;
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Full kernel `b = 6 b1 beta1 + 2 b2 beta2 + b3 beta3 + 3 b4 beta4`, in
/// shear units.
pub fn full_kernel(
    ray: &RayleighData,
    cc: &CubicCoefficients,
    mu: f64,
    xi: [f64; 3],
) -> Result<C> {
    let beta = cc.normalized(mu);
    let weights = [6.0 * beta[0], 2.0 * beta[1], beta[2], 3.0 * beta[3]];
    let mut total = C::new(0.0, 0.0);
    for (kind, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            total += *w * elementary_kernel(ray, kind + 1, xi)?;
        }
    }
    Ok(total)
}

/// Canonical rational kernels `H1 .. H8`; `rho = om1 / om2 in (0, 1)`.
pub fn canonical_h(index: usize, rho: f64, xi: [f64; 3]) -> f64 {
    let [x1, x2, x3] = xi;
    let (a1, a2, a3) = (x1.abs(), x2.abs(), x3.abs());
    match index {
        1 => a1 * a2 * a3 / (a1 + a2 + a3),
        2 => {
            a1 * a2
                * a3
                * (1.0 / (rho * a1 + a2 + a3)
                    + 1.0 / (a1 + rho * a2 + a3)
                    + 1.0 / (a1 + a2 + rho * a3))
        }
        3 => {
            a1 * a2
                * a3
                * (1.0 / (a1 + rho * a2 + rho * a3)
                    + 1.0 / (rho * a1 + a2 + rho * a3)
                    + 1.0 / (rho * a1 + rho * a2 + a3))
        }
        4 => (a1 * x2 * x3 + x1 * a2 * x3 + x1 * x2 * a3) / (a1 + a2 + a3),
        5 => {
            a1 * x2 * x3 / (a1 + rho * a2 + rho * a3)
                + x1 * a2 * x3 / (rho * a1 + a2 + rho * a3)
                + x1 * x2 * a3 / (rho * a1 + rho * a2 + a3)
        }
        6 => {
            a1 * x2 * x3 * (1.0 / (a1 + rho * a2 + a3) + 1.0 / (a1 + a2 + rho * a3))
                + x1 * a2 * x3 * (1.0 / (rho * a1 + a2 + a3) + 1.0 / (a1 + a2 + rho * a3))
                + x1 * x2 * a3 * (1.0 / (rho * a1 + a2 + a3) + 1.0 / (a1 + rho * a2 + a3))
        }
        7 => {
            a1 * x2 * x3 / (rho * a1 + a2 + a3)
                + x1 * a2 * x3 / (a1 + rho * a2 + a3)
                + x1 * x2 * a3 / (a1 + a2 + rho * a3)
        }
        8 => {
            a1 * x2 * x3 * (1.0 / (rho * a1 + rho * a2 + a3) + 1.0 / (rho * a1 + a2 + rho * a3))
                + x1 * a2 * x3
                    * (1.0 / (rho * a1 + rho * a2 + a3) + 1.0 / (a1 + rho * a2 + rho * a3))
                + x1 * x2 * a3
                    * (1.0 / (rho * a1 + a2 + rho * a3) + 1.0 / (a1 + rho * a2 + rho * a3))
        }
        _ => panic!("canonical kernel index out of range"),
    }
}

/// Symmetric resonant kernel `Lambda(k, k') = b(-(k + k'), k, k')`.
pub fn resonance_lambda(
    ray: &RayleighData,
    cc: &CubicCoefficients,
    mu: f64,
    k: f64,
    kp: f64,
) -> Result<C> {
    full_kernel(ray, cc, mu, [-(k + kp), k, kp])
}

/// Least-squares fit of the resonant kernel onto `H1, H2, H3`.
pub struct CanonicalFit {
    pub coeffs: [f64; 3],
    /// Largest absolute fit error over the sample set.
    pub max_residual: f64,
    /// Largest imaginary part seen in the resonant kernel samples.
    pub max_imag: f64,
}

/// Fit `Lambda(k, k')` on a sample set onto the three canonical kernels
/// evaluated on the resonant set. The fit is exact (residual at rounding
/// level) for isotropic materials.
pub fn fit_canonical(
    ray: &RayleighData,
    cc: &CubicCoefficients,
    mu: f64,
    samples: &[(f64, f64)],
) -> Result<CanonicalFit> {
    let rho = ray.om1 / ray.om2;
    let n = samples.len();
    if n < 3 {
        return Err(Error::Config("canonical fit needs at least 3 samples".into()));
    }
    let mut cols = vec![vec![0.0f64; n]; 3];
    let mut b = vec![0.0f64; n];
    let mut max_imag = 0.0f64;
    for (row, &(k, kp)) in samples.iter().enumerate() {
        let lam = resonance_lambda(ray, cc, mu, k, kp)?;
        max_imag = max_imag.max(lam.im.abs());
        let xi = [-(k + kp), k, kp];
        for (c, col) in cols.iter_mut().enumerate() {
            col[row] = canonical_h(c + 1, rho, xi);
        }
        b[row] = lam.re;
    }
    // Least squares by modified Gram-Schmidt QR; the normal equations are
    // too ill conditioned here (the three kernels are nearly parallel).
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut q = cols.clone();
    let mut r = [[0.0f64; 3]; 3];
    for j in 0..3 {
        for i in 0..j {
            let (head, tail) = q.split_at_mut(j);
            r[i][j] = dot(&head[i], &tail[0]);
            for (t, h) in tail[0].iter_mut().zip(&head[i]) {
                *t -= r[i][j] * h;
            }
        }
        r[j][j] = dot(&q[j], &q[j]).sqrt();
        if r[j][j] < 1e-300 {
            return Err(Error::Numerical("singular canonical fit system".into()));
        }
        for v in q[j].iter_mut() {
            *v /= r[j][j];
        }
    }
    let qtb = [dot(&q[0], &b), dot(&q[1], &b), dot(&q[2], &b)];
    let mut coeffs = [0.0f64; 3];
    for j in (0..3).rev() {
        let mut s = qtb[j];
        for i in j + 1..3 {
            s -= r[j][i] * coeffs[i];
        }
        coeffs[j] = s / r[j][j];
    }
    let mut max_residual = 0.0f64;
    for row in 0..n {
        let fit = coeffs[0] * cols[0][row] + coeffs[1] * cols[1][row] + coeffs[2] * cols[2][row];
        max_residual = max_residual.max((fit - b[row]).abs());
    }
    Ok(CanonicalFit { coeffs, max_residual, max_imag })
}

/// Precomputed resonant kernel values on a uniform frequency grid, with the
/// amplitude-equation prefactor stored alongside.
#[derive(Debug, Clone)]
pub struct KernelTable {
    /// Number of frequencies per axis (FFT length of the fast variable).
    pub n: usize,
    /// Period of the fast variable; frequency spacing is `2 pi / l_theta`.
    pub l_theta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub beta: [f64; 4],
    /// `-1 / (4 pi c0)`, the prefactor of the bilinear term.
    pub prefactor: f64,
    /// `Lambda(k_a, k_b)` row-major over signed frequency indices
    /// `a, b in [-n/2, n/2)`, offset by `n/2`.
    pub values: Vec<C>,
}

impl KernelTable {
    /// Signed frequency for table slot `i in 0..n`.
    pub fn freq(&self, i: usize) -> f64 {
        (i as isize - (self.n / 2) as isize) as f64 * 2.0 * std::f64::consts::PI / self.l_theta
    }

    /// Table slot for a signed integer mode number, if in range.
    pub fn slot(&self, mode: isize) -> Option<usize> {
        let off = mode + (self.n / 2) as isize;
        (0..self.n as isize).contains(&off).then_some(off as usize)
    }

    /// `Lambda` at signed mode numbers `(a, b)`; zero outside the table.
    pub fn lambda_at(&self, a: isize, b: isize) -> C {
        match (self.slot(a), self.slot(b)) {
            (Some(i), Some(j)) => self.values[i * self.n + j],
            _ => C::new(0.0, 0.0),
        }
    }

    fn cache_key(n: usize, l_theta: f64, lambda: f64, mu: f64, beta: [f64; 4]) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "kernel-table-v1|n={n}|l={l_theta:.17e}|lambda={lambda:.17e}|mu={mu:.17e}|beta={:.17e},{:.17e},{:.17e},{:.17e}",
            beta[0], beta[1], beta[2], beta[3]
        ));
        let digest = h.finalize();
        digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
    }

    /// Path of the cache file for this table inside `dir`.
    pub fn cache_path(dir: &Path, n: usize, l_theta: f64, lambda: f64, mu: f64, beta: [f64; 4]) -> PathBuf {
        dir.join(format!("kernel-{}.bin", Self::cache_key(n, l_theta, lambda, mu, beta)))
    }

    /// Write the binary table: a fixed header followed by row-major
    /// little-endian complex64 values.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 16 * self.values.len());
        buf.extend_from_slice(b"RPKT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        for v in [self.l_theta, self.lambda, self.mu, self.prefactor] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.beta {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 80 || &buf[0..4] != b"RPKT" {
            return Err(Error::Config(format!("not a kernel table: {}", path.display())));
        }
        let rd_u32 = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let rd_u64 = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let rd_f = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        if rd_u32(4) != 1 {
            return Err(Error::Config("unsupported kernel table version".into()));
        }
        let n = rd_u64(8) as usize;
        let (l_theta, lambda, mu, prefactor) = (rd_f(16), rd_f(24), rd_f(32), rd_f(40));
        let beta = [rd_f(48), rd_f(56), rd_f(64), rd_f(72)];
        let mut values = Vec::with_capacity(n * n);
        let base = 80;
        if buf.len() != base + 16 * n * n {
            return Err(Error::Config("kernel table truncated".into()));
        }
        for i in 0..n * n {
            values.push(C::new(rd_f(base + 16 * i), rd_f(base + 16 * i + 8)));
        }
        Ok(Self { n, l_theta, lambda, mu, beta, prefactor, values })
    }

    /// CSV export: `k,kp,re,im` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
        w.write_record(["k", "kp", "re", "im"])
            .map_err(|e| Error::Config(e.to_string()))?;
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.values[i * self.n + j];
                w.write_record([
                    format!("{:.17e}", self.freq(i)),
                    format!("{:.17e}", self.freq(j)),
                    format!("{:.17e}", v.re),
                    format!("{:.17e}", v.im),
                ])
                .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Build (or load from `cache_dir`) the resonant kernel table on the
/// frequency grid of an FFT of length `n` with period `l_theta`.
pub fn build_kernel_table(
    ray: &RayleighData,
    lambda: f64,
    mu: f64,
    cc: &CubicCoefficients,
    n: usize,
    l_theta: f64,
    cache_dir: Option<&Path>,
) -> Result<KernelTable> {
    let prefactor = -1.0 / (4.0 * std::f64::consts::PI * ray.c0);
    if let Some(dir) = cache_dir {
        let path = KernelTable::cache_path(dir, n, l_theta, lambda, mu, cc.beta);
        if path.exists() {
            let t = KernelTable::read_binary(&path)?;
            if t.n == n {
                return Ok(t);
            }
        }
    }
    // Combined delta contraction per index combination; the z-integral of the
    // triple factor product is then a single weighted sum.
    let beta = cc.normalized(mu);
    let weights = [6.0 * beta[0], 2.0 * beta[1], beta[2], 3.0 * beta[3]];
    let mut combos: Vec<([usize; 6], f64)> = Vec::new();
    for al in 0..2 {
        for j in 0..2 {
            for be in 0..2 {
                for l in 0..2 {
                    for ga in 0..2 {
                        for m in 0..2 {
                            let idx = [al, j, be, l, ga, m];
                            let d: f64 = (1..=4)
                                .map(|kind| weights[kind - 1] * delta_coefficient(kind, idx))
                                .sum();
                            if d != 0.0 {
                                combos.push((idx, d));
                            }
                        }
                    }
                }
            }
        }
    }
    let dk = 2.0 * std::f64::consts::PI / l_theta;
    let half = (n / 2) as isize;
    let freqs: Vec<f64> = (0..n).map(|i| (i as isize - half) as f64 * dk).collect();
    // Factor coefficients per frequency: (c1, c2) for rates
    // (-om1 |xi|, -om2 |xi|), per (alpha, j) slot.
    let fc: Vec<[[C; 2]; 4]> = freqs
        .iter()
        .map(|&xi| {
            let mut out = [[C::new(0.0, 0.0); 2]; 4];
            if xi != 0.0 {
                for slot in 0..4 {
                    let f = factor(ray, slot / 2, slot % 2, xi);
                    for (ti, t) in f.terms.iter().enumerate() {
                        out[slot][ti] = t.coeff;
                    }
                }
            }
            out
        })
        .collect();
    let rate = |xi: f64, which: usize| {
        if which == 0 {
            ray.om1 * xi.abs()
        } else {
            ray.om2 * xi.abs()
        }
    };
    let values: Vec<C> = (0..n * n)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / n, cell % n);
            let (k, kp) = (freqs[i], freqs[j]);
            let k0 = -(k + kp);
            // The first argument must also lie on the grid for the factor
            // cache; recompute it directly when it falls outside.
            let slot0 = (-((i as isize - half) + (j as isize - half))) + half;
            let f0: [[C; 2]; 4] = if (0..n as isize).contains(&slot0) {
                fc[slot0 as usize]
            } else {
                let mut out = [[C::new(0.0, 0.0); 2]; 4];
                if k0 != 0.0 {
                    for slot in 0..4 {
                        let f = factor(ray, slot / 2, slot % 2, k0);
                        for (ti, t) in f.terms.iter().enumerate() {
                            out[slot][ti] = t.coeff;
                        }
                    }
                }
                out
            };
            if k == 0.0 || kp == 0.0 || k0 == 0.0 {
                return C::new(0.0, 0.0);
            }
            let (f1, f2) = (fc[i], fc[j]);
            let mut total = C::new(0.0, 0.0);
            for (idx, d) in &combos {
                let s0 = 2 * idx[0] + idx[1];
                let s1 = 2 * idx[2] + idx[3];
                let s2 = 2 * idx[4] + idx[5];
                let mut integral = C::new(0.0, 0.0);
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            let coeff = f0[s0][a] * f1[s1][b] * f2[s2][c];
                            let total_rate = rate(k0, a) + rate(k, b) + rate(kp, c);
                            integral += coeff / total_rate;
                        }
                    }
                }
                total += *d * integral;
            }
            total
        })
        .collect();
    let table = KernelTable {
        n,
        l_theta,
        lambda,
        mu,
        beta: cc.beta,
        prefactor,
        values,
    };
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
        table.write_binary(&KernelTable::cache_path(dir, n, l_theta, lambda, mu, cc.beta))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{solve_rayleigh, wave_speeds};

    fn ray() -> RayleighData {
        solve_rayleigh(&wave_speeds(1.0, 1.0).unwrap()).unwrap()
    }

    fn simpson<F: Fn(f64) -> C>(f: F, a: f64, b: f64, n: usize) -> C {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    /// Quadrature oracle for an elementary kernel.
    fn elementary_quadrature(r: &RayleighData, kind: usize, xi: [f64; 3]) -> C {
        let integrand = |z: f64| {
            let mut s = C::new(0.0, 0.0);
            for al in 0..2 {
                for j in 0..2 {
                    for be in 0..2 {
                        for l in 0..2 {
                            for ga in 0..2 {
                                for m in 0..2 {
                                    let d = delta_coefficient(kind, [al, j, be, l, ga, m]);
                                    if d == 0.0 {
                                        continue;
                                    }
                                    s += d
                                        * factor(r, al, j, xi[0]).eval(z)
                                        * factor(r, be, l, xi[1]).eval(z)
                                        * factor(r, ga, m, xi[2]).eval(z);
                                }
                            }
                        }
                    }
                }
            }
            s
        };
        simpson(integrand, 0.0, 120.0, 24000)
    }

    #[test]
    fn elementary_kernels_match_quadrature() {
        let r = ray();
        for kind in 1..=4 {
            for xi in [[1.0, 1.0, 1.0], [-2.0, 0.7, 1.3], [0.4, -1.1, 0.7]] {
                let exact = elementary_kernel(&r, kind, xi).unwrap();
                let quad = elementary_quadrature(&r, kind, xi);
                assert!(
                    (exact - quad).norm() < 1e-8 * (1.0 + exact.norm()),
                    "kind {kind} xi {xi:?}: {exact} vs {quad}"
                );
            }
        }
    }

    #[test]
    fn first_elementary_kernel_closed_form() {
        // The diagonal contraction collapses to a single exponential profile,
        // so b1 has a one-line closed form.
        let r = ray();
        let (om1, om2) = (r.om1, r.om2);
        let star = (om1 * om1 + 1.0) * (om2 * om2 - 1.0);
        for xi in [[1.0f64, 1.0, 1.0], [-2.0, 0.7, 1.3]] {
            let (a1, a2, a3) = (xi[0].abs(), xi[1].abs(), xi[2].abs());
            let expect = star.powi(3) * a1 * a2 * a3 / (om2 * (a1 + a2 + a3));
            let got = elementary_kernel(&r, 1, xi).unwrap();
            assert!((got - expect).norm() < 1e-10 * expect.abs());
        }
    }

    #[test]
    fn kernel_symmetry_and_reality() {
        let r = ray();
        let cc = CubicCoefficients::svk(1.0, 1.0);
        let xi = [0.9, -1.7, 0.5];
        let b = full_kernel(&r, &cc, 1.0, xi).unwrap();
        for perm in [[0usize, 2, 1], [1, 0, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]] {
            let p = [xi[perm[0]], xi[perm[1]], xi[perm[2]]];
            let bp = full_kernel(&r, &cc, 1.0, p).unwrap();
            assert!((b - bp).norm() < 1e-12 * (1.0 + b.norm()));
        }
        let neg = full_kernel(&r, &cc, 1.0, [-xi[0], -xi[1], -xi[2]]).unwrap();
        assert!((neg - b.conj()).norm() < 1e-12 * (1.0 + b.norm()));
    }

    #[test]
    fn kernel_homogeneity_degree_two() {
        let r = ray();
        let cc = CubicCoefficients::svk(1.0, 1.0);
        let xi = [0.9, -1.7, 0.5];
        let b = full_kernel(&r, &cc, 1.0, xi).unwrap();
        for s in [0.3, 2.0, 7.5] {
            let bs = full_kernel(&r, &cc, 1.0, [s * xi[0], s * xi[1], s * xi[2]]).unwrap();
            assert!((bs - s * s * b).norm() < 1e-10 * (1.0 + bs.norm()));
        }
    }

    #[test]
    fn kernel_growth_bound() {
        let r = ray();
        let cc = CubicCoefficients::svk(1.0, 1.0);
        let mut worst: f64 = 0.0;
        let mut x = 0.123f64;
        let mut next = || {
            x = (x * 997.0 + 0.377).fract();
            4.0 * x - 2.0
        };
        for _ in 0..300 {
            let xi = [next(), next(), next()];
            if xi.iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            let b = full_kernel(&r, &cc, 1.0, xi).unwrap();
            let m = xi.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            let bound = (xi[0].abs() * xi[1].abs() * xi[2].abs()).sqrt() * m.sqrt();
            worst = worst.max(b.norm() / bound);
        }
        assert!(worst.is_finite() && worst < 1e3, "growth ratio {worst}");
    }

    #[test]
    fn canonical_identities_on_resonant_set() {
        let r = ray();
        let rho = r.om1 / r.om2;
        for (k, kp) in [(1.0f64, 2.0), (-0.7, 0.3), (2.5, -1.1)] {
            let xi = [-(k + kp), k, kp];
            if xi.iter().any(|v| v.abs() < 1e-9) {
                continue;
            }
            let h1 = canonical_h(1, rho, xi);
            let h3 = canonical_h(3, rho, xi);
            let h4 = canonical_h(4, rho, xi);
            let h5 = canonical_h(5, rho, xi);
            assert!((h4 + h1).abs() < 1e-12 * (1.0 + h1.abs()));
            assert!(
                (h3 + h5 - 4.0 / (1.0 + rho) * h1).abs() < 1e-12 * (1.0 + h1.abs()),
                "k {k} kp {kp}"
            );
        }
    }

    #[test]
    fn resonant_kernel_fits_three_canonical_kernels() {
        let r = ray();
        let mut samples = Vec::new();
        for i in 1..=6 {
            for j in 1..=6 {
                let (k, kp) = (0.4 * i as f64, -2.3 + 0.7 * j as f64);
                if kp.abs() > 1e-6 && (k + kp).abs() > 1e-6 {
                    samples.push((k, kp));
                }
            }
        }
        for beta in [
            CubicCoefficients::svk(1.0, 1.0),
            CubicCoefficients { beta: [0.3, -0.4, 1.2, 0.15] },
        ] {
            let fit = fit_canonical(&r, &beta, 1.0, &samples).unwrap();
            assert!(fit.max_imag < 1e-10, "imag {}", fit.max_imag);
            assert!(fit.max_residual < 1e-8, "residual {}", fit.max_residual);
        }
    }

    #[test]
    fn table_roundtrip_and_cache() {
        let r = ray();
        let cc = CubicCoefficients::svk(1.0, 1.0);
        let dir = std::env::temp_dir().join("rp-kernel-cache-test");
        let _ = std::fs::remove_dir_all(&dir);
        let t = build_kernel_table(&r, 1.0, 1.0, &cc, 16, 20.0, Some(&dir)).unwrap();
        // Spot-check against the direct evaluation.
        let (i, j) = (10, 13);
        let direct = resonance_lambda(&r, &cc, 1.0, t.freq(i), t.freq(j)).unwrap();
        assert!((t.values[i * t.n + j] - direct).norm() < 1e-10 * (1.0 + direct.norm()));
        // Reload through the cache and compare bit-for-bit.
        let t2 = build_kernel_table(&r, 1.0, 1.0, &cc, 16, 20.0, Some(&dir)).unwrap();
        assert_eq!(t.values.len(), t2.values.len());
        for (a, b) in t.values.iter().zip(&t2.values) {
            assert_eq!(a, b);
        }
        let _ = std::fs::remove_dir_all(&dir);
    }
}
