//! Periodic 2-D spectral grids for fields `f(x1, theta)`.
//!
//! Transforms use the integral convention: the spectrum samples the
//! continuous Fourier transform of one period, `F(xi1, k) = int f exp(-i xi1
//! x1 - i k theta)`, so bilinear convolutions carry the measure
//! `dk = 2 pi / L` and Plancherel holds with the `1 / (2 pi)^2` factor.

use num_complex::Complex64 as C;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::{Error, Result};

/// Uniform periodic grid; both sizes are powers of two, at least 8.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Grid2 {
    pub n_x1: usize,
    pub l_x1: f64,
    pub n_theta: usize,
    pub l_theta: f64,
}

impl Grid2 {
    pub fn new(n_x1: usize, l_x1: f64, n_theta: usize, l_theta: f64) -> Result<Self> {
        for n in [n_x1, n_theta] {
            if n < 8 || !n.is_power_of_two() {
                return Err(Error::Config(format!("grid size {n} must be a power of two >= 8")));
            }
        }
        if l_x1 <= 0.0 || l_theta <= 0.0 {
            return Err(Error::Config("grid periods must be positive".into()));
        }
        Ok(Self { n_x1, l_x1, n_theta, l_theta })
    }

    pub fn dx1(&self) -> f64 {
        self.l_x1 / self.n_x1 as f64
    }

    pub fn dtheta(&self) -> f64 {
        self.l_theta / self.n_theta as f64
    }

    /// Signed mode number for FFT slot `i` of an axis of length `n`.
    pub fn mode(i: usize, n: usize) -> isize {
        if i < n / 2 {
            i as isize
        } else {
            i as isize - n as isize
        }
    }

    pub fn xi1(&self, i: usize) -> f64 {
        2.0 * std::f64::consts::PI * Self::mode(i, self.n_x1) as f64 / self.l_x1
    }

    pub fn k_theta(&self, j: usize) -> f64 {
        2.0 * std::f64::consts::PI * Self::mode(j, self.n_theta) as f64 / self.l_theta
    }

    pub fn x1(&self, i: usize) -> f64 {
        // Centered box [-L/2, L/2).
        -0.5 * self.l_x1 + i as f64 * self.dx1()
    }

    pub fn theta(&self, j: usize) -> f64 {
        -0.5 * self.l_theta + j as f64 * self.dtheta()
    }

    pub fn len(&self) -> usize {
        self.n_x1 * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Real-valued field on a [`Grid2`], row-major `[ix1][itheta]`.
#[derive(Debug, Clone)]
pub struct Field {
    pub grid: Grid2,
    pub data: Vec<f64>,
}

/// Complex spectrum on a [`Grid2`], same layout, integral convention.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub grid: Grid2,
    pub data: Vec<C>,
}

impl Field {
    pub fn zeros(grid: Grid2) -> Self {
        Self { grid, data: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: Grid2, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for i in 0..grid.n_x1 {
            for j in 0..grid.n_theta {
                data.push(f(grid.x1(i), grid.theta(j)));
            }
        }
        Self { grid, data }
    }
}

impl Spectrum {
    pub fn zeros(grid: Grid2) -> Self {
        Self { grid, data: vec![C::new(0.0, 0.0); grid.len()] }
    }

    /// Largest deviation from the Hermitian symmetry of a real field's
    /// spectrum.
    pub fn hermitian_defect(&self) -> f64 {
        let (n1, n2) = (self.grid.n_x1, self.grid.n_theta);
        let mut worst = 0.0f64;
        for i in 0..n1 {
            for j in 0..n2 {
                let ni = (n1 - i) % n1;
                let nj = (n2 - j) % n2;
                let d = (self.data[i * n2 + j] - self.data[ni * n2 + nj].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }
}

/// FFT plans shared by all transforms on one grid.
pub struct SpectralCtx {
    pub grid: Grid2,
    fwd_x1: Arc<dyn Fft<f64>>,
    inv_x1: Arc<dyn Fft<f64>>,
    fwd_th: Arc<dyn Fft<f64>>,
    inv_th: Arc<dyn Fft<f64>>,
}

impl SpectralCtx {
    pub fn new(grid: Grid2) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            grid,
            fwd_x1: planner.plan_fft_forward(grid.n_x1),
            inv_x1: planner.plan_fft_inverse(grid.n_x1),
            fwd_th: planner.plan_fft_forward(grid.n_theta),
            inv_th: planner.plan_fft_inverse(grid.n_theta),
        }
    }

    fn fft_rows(&self, data: &mut [C], forward: bool) {
        let plan = if forward { &self.fwd_th } else { &self.inv_th };
        for row in data.chunks_exact_mut(self.grid.n_theta) {
            plan.process(row);
        }
    }

    /// Origin phase `exp(-i xi x_min)` for the centered box; with even grid
    /// sizes this is a parity sign per axis.
    fn origin_signs(&self, data: &mut [C], x1_axis: bool, theta_axis: bool) {
        let n2 = self.grid.n_theta;
        for (idx, v) in data.iter_mut().enumerate() {
            let (i, j) = (idx / n2, idx % n2);
            let mut s = 1.0;
            if x1_axis && i % 2 == 1 {
                s = -s;
            }
            if theta_axis && j % 2 == 1 {
                s = -s;
            }
            *v *= s;
        }
    }

    fn fft_cols(&self, data: &mut [C], forward: bool) {
        let plan = if forward { &self.fwd_x1 } else { &self.inv_x1 };
        let (n1, n2) = (self.grid.n_x1, self.grid.n_theta);
        let mut col = vec![C::new(0.0, 0.0); n1];
        for j in 0..n2 {
            for i in 0..n1 {
                col[i] = data[i * n2 + j];
            }
            plan.process(&mut col);
            for i in 0..n1 {
                data[i * n2 + j] = col[i];
            }
        }
    }

    /// Forward transform of a real field.
    pub fn transform(&self, f: &Field) -> Spectrum {
        let mut data: Vec<C> = f.data.iter().map(|&v| C::new(v, 0.0)).collect();
        self.fft_rows(&mut data, true);
        self.fft_cols(&mut data, true);
        let scale = self.grid.dx1() * self.grid.dtheta();
        for v in data.iter_mut() {
            *v *= scale;
        }
        self.origin_signs(&mut data, true, true);
        Spectrum { grid: self.grid, data }
    }

    /// Inverse transform; the imaginary residue of a Hermitian spectrum is
    /// dropped.
    pub fn inverse(&self, s: &Spectrum) -> Field {
        Field { grid: self.grid, data: self.inverse_c(s).iter().map(|v| v.re).collect() }
    }

    /// Inverse transform keeping complex values.
    pub fn inverse_c(&self, s: &Spectrum) -> Vec<C> {
        let mut data = s.data.clone();
        self.origin_signs(&mut data, true, true);
        self.fft_rows(&mut data, false);
        self.fft_cols(&mut data, false);
        let scale = 1.0 / (self.grid.l_x1 * self.grid.l_theta);
        for v in data.iter_mut() {
            *v *= scale;
        }
        data
    }

    /// Forward FFT in `x1` only: rows indexed by `x1` become rows indexed by
    /// `xi1`, carrying the `dx1` measure.
    pub fn transform_x1(&self, data: &mut [C]) {
        self.fft_cols(data, true);
        let scale = self.grid.dx1();
        for v in data.iter_mut() {
            *v *= scale;
        }
        self.origin_signs(data, true, false);
    }

    /// Inverse FFT in `x1` only.
    pub fn inverse_x1(&self, data: &mut [C]) {
        self.origin_signs(data, true, false);
        self.fft_cols(data, false);
        let scale = 1.0 / self.grid.l_x1;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// Hilbert transform in `theta`: multiplier `-i sgn k`, zero mean untouched.
pub fn hilbert(s: &Spectrum) -> Spectrum {
    let mut out = s.clone();
    let (n1, n2) = (s.grid.n_x1, s.grid.n_theta);
    for i in 0..n1 {
        for j in 0..n2 {
            let m = Grid2::mode(j, n2);
            let sgn = match m.cmp(&0) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => -1.0,
                std::cmp::Ordering::Equal => 0.0,
            };
            out.data[i * n2 + j] *= C::new(0.0, -sgn);
        }
    }
    out
}

/// Two-thirds dealiasing in both directions.
pub fn dealias(s: &mut Spectrum) {
    let (n1, n2) = (s.grid.n_x1, s.grid.n_theta);
    for i in 0..n1 {
        let m1 = Grid2::mode(i, n1).unsigned_abs();
        for j in 0..n2 {
            let m2 = Grid2::mode(j, n2).unsigned_abs();
            if 3 * m1 > n1 || 3 * m2 > n2 {
                s.data[i * n2 + j] = C::new(0.0, 0.0);
            }
        }
    }
}

/// Weighted norm on the spectrum of a snapshot field.
///
/// Weight `(|X|^2 + gamma^2)^{r/2} (xi1^2 + k^2 + gamma^2)^{m/2}` with
/// `X = (beta0 k / eps, xi1 + k / eps)`; `r = m = 0`, `gamma = 1` gives the
/// plain `L^2` norm by Plancherel.
pub fn singular_norm(s: &Spectrum, r: f64, m: f64, gamma: f64, eps: f64, beta0: f64) -> f64 {
    let g = s.grid;
    let meas =
        (2.0 * std::f64::consts::PI / g.l_x1) * (2.0 * std::f64::consts::PI / g.l_theta);
    let mut total = 0.0;
    for i in 0..g.n_x1 {
        let xi1 = g.xi1(i);
        for j in 0..g.n_theta {
            let k = g.k_theta(j);
            let x_sq = (beta0 * k / eps).powi(2) + (xi1 + k / eps).powi(2);
            let w = (x_sq + gamma * gamma).powf(0.5 * r)
                * (xi1 * xi1 + k * k + gamma * gamma).powf(0.5 * m);
            total += w * w * s.data[i * g.n_theta + j].norm_sqr();
        }
    }
    (total * meas).sqrt() / (2.0 * std::f64::consts::PI)
}

/// Least-squares power-law fit `y = a x^p` in log-log coordinates.
/// Returns `(p, ln a, r^2)`.
pub fn power_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("power fit needs matched samples".into()));
    }
    if xs.iter().chain(ys.iter()).any(|v| *v <= 0.0 || !v.is_finite()) {
        return Err(Error::Numerical("power fit needs positive finite samples".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("degenerate abscissae in power fit".into()));
    }
    let p = sxy / sxx;
    let a = my - p * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((p, a, r2))
}

/// Ratio of the largest field magnitude in the outer 20% frame of the box to
/// the largest magnitude overall; small values confirm the periodic box does
/// not contaminate a localized pulse.
pub fn boundary_contamination(f: &Field) -> f64 {
    let g = f.grid;
    let mut inner = 0.0f64;
    let mut outer = 0.0f64;
    for i in 0..g.n_x1 {
        let fx = i as f64 / g.n_x1 as f64;
        for j in 0..g.n_theta {
            let ft = j as f64 / g.n_theta as f64;
            let v = f.data[i * g.n_theta + j].abs();
            if (0.2..0.8).contains(&fx) && (0.2..0.8).contains(&ft) {
                inner = inner.max(v);
            } else {
                outer = outer.max(v);
            }
        }
    }
    if inner == 0.0 {
        return 1.0;
    }
    outer / inner
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid() -> Grid2 {
        Grid2::new(16, 10.0, 32, 2.0 * std::f64::consts::PI).unwrap()
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Grid2::new(12, 1.0, 16, 1.0).is_err());
        assert!(Grid2::new(4, 1.0, 16, 1.0).is_err());
    }

    #[test]
    fn round_trip() {
        let g = grid();
        let ctx = SpectralCtx::new(g);
        let f = Field::from_fn(g, |x, t| (0.3 * x).sin() * (2.0 * t).cos() + 0.1 * t.sin());
        let back = ctx.inverse(&ctx.transform(&f));
        let worst = f
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-13);
    }

    #[test]
    fn cosine_normalization() {
        // cos(theta) on the 2 pi period: spectrum mass L_x1 L_theta / 2 at
        // the modes k = +/- 1, xi1 = 0.
        let g = grid();
        let ctx = SpectralCtx::new(g);
        let f = Field::from_fn(g, |_, t| t.cos());
        let s = ctx.transform(&f);
        let expect = g.l_x1 * g.l_theta / 2.0;
        let v = s.data[1]; // ix1 = 0, j = 1 => k = +1
        assert_abs_diff_eq!(v.re, expect, epsilon = 1e-9 * expect);
        assert!(v.im.abs() < 1e-9 * expect);
        assert!(s.hermitian_defect() < 1e-9 * expect);
    }

    #[test]
    fn plancherel_matches_l2() {
        let g = grid();
        let ctx = SpectralCtx::new(g);
        let f = Field::from_fn(g, |x, t| (-0.1 * x * x).exp() * (3.0 * t).sin());
        let s = ctx.transform(&f);
        let l2 = (f.data.iter().map(|v| v * v).sum::<f64>() * g.dx1() * g.dtheta()).sqrt();
        let sn = singular_norm(&s, 0.0, 0.0, 1.0, 0.25, -0.9194);
        assert_abs_diff_eq!(l2, sn, epsilon = 1e-12 * l2.max(1.0));
    }

    #[test]
    fn singular_weight_scales_with_eps() {
        // For cos(theta), the weight at r = 1 concentrates at k = +/- 1 and
        // grows like |beta| / eps.
        let g = grid();
        let ctx = SpectralCtx::new(g);
        let f = Field::from_fn(g, |_, t| t.cos());
        let s = ctx.transform(&f);
        let beta0 = -0.9194f64;
        let eps = 0.25;
        let n0 = singular_norm(&s, 0.0, 0.0, 1.0, eps, beta0);
        let n1 = singular_norm(&s, 1.0, 0.0, 1.0, eps, beta0);
        let expect = ((beta0 * beta0 + 1.0) / (eps * eps) + 1.0).sqrt();
        assert_abs_diff_eq!(n1 / n0, expect, epsilon = 1e-9 * expect);
    }

    #[test]
    fn hilbert_squares_to_minus_projection() {
        let g = grid();
        let ctx = SpectralCtx::new(g);
        let f = Field::from_fn(g, |x, t| (2.0 * t).cos() + 0.3 * (t + 0.1 * x).sin());
        let s = ctx.transform(&f);
        let hh = hilbert(&hilbert(&s));
        for (j, (a, b)) in hh.data.iter().zip(&s.data).enumerate() {
            let k = Grid2::mode(j % g.n_theta, g.n_theta);
            let expect = if k == 0 { C::new(0.0, 0.0) } else { -b };
            assert!((a - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn dealias_clears_high_modes_only() {
        let g = grid();
        let ctx = SpectralCtx::new(g);
        let f = Field::from_fn(g, |x, t| (5.0 * t).cos() + (12.0 * t).cos() + (0.3 * x).sin());
        let mut s = ctx.transform(&f);
        dealias(&mut s);
        assert!(s.data[12].norm() < 1e-12); // k = 12 > 32/3
        assert!(s.data[5].norm() > 1.0); // k = 5 kept
    }

    #[test]
    fn power_fit_recovers_exponent() {
        let xs = [0.125f64, 0.25, 0.5, 1.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(1.4)).collect();
        let (p, a, r2) = power_fit(&xs, &ys).unwrap();
        assert_abs_diff_eq!(p, 1.4, epsilon = 1e-12);
        assert_abs_diff_eq!(a.exp(), 3.0, epsilon = 1e-12);
        assert!(r2 > 1.0 - 1e-12);
    }

    #[test]
    fn contamination_detects_wraparound() {
        let g = grid();
        let tight = Field::from_fn(g, |x, t| (-4.0 * (x * x + t * t)).exp());
        assert!(boundary_contamination(&tight) < 1e-3);
        let wide = Field::from_fn(g, |x, _| (-0.001 * x * x).exp());
        assert!(boundary_contamination(&wide) > 0.5);
    }
}
