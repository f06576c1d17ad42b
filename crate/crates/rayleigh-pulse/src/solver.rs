//! Pseudospectral integrator for the nonlocal amplitude equation
//! `dt w + c dx1 w + H(B(w, w)) = g` on the periodic `(x1, theta)` box.
//!
//! The state is kept fully spectral. The bilinear term acts per `x1` slice
//! (physical in `x1`, spectral in the fast frequency `k`) through the
//! precomputed [`KernelTable`]; transport is handled exactly by an
//! integrating factor inside a Lawson Runge-Kutta step, so the scheme is
//! exact on the pure transport limit and fourth order with forcing.

use std::f64::consts::PI;
use std::io::{Read as _, Write as _};
use std::path::Path;

use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::KernelTable;
use crate::material::{profile_rhat, RayleighData};
use crate::spectral::{dealias, hilbert, singular_norm, Field, Grid2, SpectralCtx, Spectrum};
use crate::{Error, Result};

/// Separable time envelope of the boundary force.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Envelope {
    Constant { amp: f64 },
    Gaussian { amp: f64, t0: f64, sigma: f64 },
}

impl Envelope {
    pub fn eval(&self, t: f64) -> f64 {
        self.derivative(t, 0)
    }

    /// Analytic time derivative of the envelope, orders 0 through 3.
    pub fn derivative(&self, t: f64, order: usize) -> f64 {
        match *self {
            Envelope::Constant { amp } => {
                if order == 0 {
                    amp
                } else {
                    0.0
                }
            }
            Envelope::Gaussian { amp, t0, sigma } => {
                let u = (t - t0) / sigma;
                let h = match order {
                    0 => 1.0,
                    1 => -2.0 * u,
                    2 => 4.0 * u * u - 2.0,
                    3 => -8.0 * u * u * u + 12.0 * u,
                    _ => panic!("envelope derivative order {order} not supported"),
                };
                amp * h * (-u * u).exp() / sigma.powi(order as i32)
            }
        }
    }
}

/// Amplitude-equation source `g` built from a two-component boundary force
/// with a separable time envelope: `g_hat(t, xi1, k) = env(t) base(xi1, k)`.
pub struct SourceG {
    pub base: Spectrum,
    pub envelope: Envelope,
}

impl SourceG {
    pub fn at(&self, t: f64) -> Spectrum {
        self.scaled(self.envelope.eval(t))
    }

    pub fn derivative_at(&self, t: f64, order: usize) -> Spectrum {
        self.scaled(self.envelope.derivative(t, order))
    }

    fn scaled(&self, a: f64) -> Spectrum {
        let mut s = self.base.clone();
        for v in s.data.iter_mut() {
            *v *= a;
        }
        s
    }
}

/// Projects a two-component boundary-force profile onto the source of the
/// amplitude equation: `g_hat(k) = -(i sgn k / c0) conj(rhat(k, 0)) . G_hat(k)`.
pub fn source_g(
    ray: &RayleighData,
    ctx: &SpectralCtx,
    force: [&Field; 2],
    envelope: Envelope,
) -> SourceG {
    let g = ctx.grid;
    let s1 = ctx.transform(force[0]);
    let s2 = ctx.transform(force[1]);
    let mut base = Spectrum::zeros(g);
    for i in 0..g.n_x1 {
        for j in 0..g.n_theta {
            let k = g.k_theta(j);
            if k == 0.0 {
                continue;
            }
            let rh = profile_rhat(ray, k, 0.0);
            let pair = rh[0].conj() * s1.data[i * g.n_theta + j]
                + rh[1].conj() * s2.data[i * g.n_theta + j];
            base.data[i * g.n_theta + j] = C::new(0.0, -k.signum() / ray.c0) * pair;
        }
    }
    SourceG { base, envelope }
}

/// FFT slot of a signed mode number, if it lies on the grid.
fn fft_slot(m: isize, n: usize) -> Option<usize> {
    let half = (n / 2) as isize;
    if m >= 0 && m < half {
        Some(m as usize)
    } else if m >= -half && m < 0 {
        Some((n as isize + m) as usize)
    } else {
        None
    }
}

/// Averages a spectrum with its reflected conjugate so it is exactly the
/// transform of a real field.
pub fn symmetrize(s: &mut Spectrum) {
    let (n1, n2) = (s.grid.n_x1, s.grid.n_theta);
    for i in 0..n1 {
        let ni = (n1 - i) % n1;
        for j in 0..n2 {
            let nj = (n2 - j) % n2;
            if (i, j) <= (ni, nj) {
                let a = s.data[i * n2 + j];
                let b = s.data[ni * n2 + nj];
                let avg = 0.5 * (a + b.conj());
                s.data[i * n2 + j] = avg;
                s.data[ni * n2 + nj] = avg.conj();
            }
        }
    }
}

/// Bilinear term: per `x1` slice, a truncated convolution in the fast
/// frequency weighted by the kernel table,
/// `B_hat(k) = pref sum_xi Lambda(k - xi, xi) u_hat(k - xi) v_hat(xi) dk`,
/// with the zero modes of `k`, `xi`, and `k - xi` excluded.
pub fn bilinear_b(
    ctx: &SpectralCtx,
    table: &KernelTable,
    u: &Spectrum,
    v: &Spectrum,
    apply_dealias: bool,
) -> Result<Spectrum> {
    let g = ctx.grid;
    if table.n != g.n_theta || (table.l_theta - g.l_theta).abs() > 1e-12 * g.l_theta {
        return Err(Error::Config("kernel table does not match the solver grid".into()));
    }
    let n2 = g.n_theta;
    let mut ur = u.data.clone();
    let mut vr = v.data.clone();
    ctx.inverse_x1(&mut ur);
    ctx.inverse_x1(&mut vr);
    let pref = table.prefactor * 2.0 * PI / g.l_theta;
    let mut out = vec![C::new(0.0, 0.0); g.len()];
    out.par_chunks_mut(n2)
        .zip(ur.par_chunks(n2).zip(vr.par_chunks(n2)))
        .for_each(|(orow, (urow, vrow))| {
            for (jk, slot) in orow.iter_mut().enumerate() {
                let mk = Grid2::mode(jk, n2);
                if mk == 0 {
                    continue;
                }
                let mut acc = C::new(0.0, 0.0);
                for (jx, vv) in vrow.iter().enumerate() {
                    let mx = Grid2::mode(jx, n2);
                    if mx == 0 || mx == mk {
                        continue;
                    }
                    let Some(sd) = fft_slot(mk - mx, n2) else { continue };
                    acc += table.lambda_at(mk - mx, mx) * urow[sd] * vv;
                }
                *slot = pref * acc;
            }
        });
    ctx.transform_x1(&mut out);
    let mut s = Spectrum { grid: g, data: out };
    if apply_dealias {
        dealias(&mut s);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_final: f64,
    /// Sobolev index for the energy log.
    pub m: f64,
    pub gamma: f64,
    pub dealias: bool,
    /// Absolute `L^2` ceiling; crossing it sets the blow-up flag.
    pub blowup_limit: f64,
    /// Keep every `save_every`-th state (plus the initial and final ones).
    pub save_every: usize,
}

impl SolverConfig {
    pub fn new(dt: f64, t_final: f64) -> Self {
        Self { dt, t_final, m: 6.0, gamma: 1.0, dealias: true, blowup_limit: 1e6, save_every: 1 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.t_final > 0.0 && self.t_final >= self.dt) {
            return Err(Error::Config("need 0 < dt <= t_final".into()));
        }
        if self.save_every == 0 {
            return Err(Error::Config("save_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AmplitudeState {
    pub t: f64,
    pub what: Spectrum,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyRow {
    pub t: f64,
    pub l2: f64,
    pub hm: f64,
    /// Backward-difference rate of the `L^2` norm.
    pub de: f64,
}

pub struct SolveOutput {
    /// Step actually used (`t_final` divided into whole steps).
    pub dt: f64,
    pub states: Vec<AmplitudeState>,
    pub energy: Vec<EnergyRow>,
    pub blow_up: bool,
}

pub struct Solver<'a> {
    pub cfg: SolverConfig,
    pub ctx: &'a SpectralCtx,
    pub ray: &'a RayleighData,
    pub table: &'a KernelTable,
    pub source: Option<&'a SourceG>,
}

impl<'a> Solver<'a> {
    pub fn new(
        cfg: SolverConfig,
        ctx: &'a SpectralCtx,
        ray: &'a RayleighData,
        table: &'a KernelTable,
        source: Option<&'a SourceG>,
    ) -> Result<Self> {
        cfg.validate()?;
        if table.n != ctx.grid.n_theta {
            return Err(Error::Config("kernel table size does not match the grid".into()));
        }
        Ok(Self { cfg, ctx, ray, table, source })
    }

    /// Nonlinear part of the right-hand side: `-H(B(w, w)) + g(t)`.
    pub fn nonlinear(&self, w: &Spectrum, t: f64) -> Result<Spectrum> {
        let b = bilinear_b(self.ctx, self.table, w, w, self.cfg.dealias)?;
        let mut n = hilbert(&b);
        for v in n.data.iter_mut() {
            *v = -*v;
        }
        if let Some(src) = self.source {
            let g = src.at(t);
            for (a, b) in n.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        // Keep the increment inside the dealiased band; in particular the
        // Nyquist rows must stay empty, since they are their own reflection
        // pair and a complex transport factor there would break reality.
        if self.cfg.dealias {
            dealias(&mut n);
        }
        Ok(n)
    }

    fn linear(&self, w: &Spectrum) -> Spectrum {
        let g = w.grid;
        let mut out = w.clone();
        for i in 0..g.n_x1 {
            let mult = C::new(0.0, -self.ray.c * g.xi1(i));
            for j in 0..g.n_theta {
                out.data[i * g.n_theta + j] *= mult;
            }
        }
        out
    }

    /// Full right-hand side `dt w_hat = -i c xi1 w_hat - H(B(w, w)) + g(t)`.
    pub fn rhs(&self, w: &Spectrum, t: f64) -> Result<Spectrum> {
        let mut out = self.nonlinear(w, t)?;
        let lin = self.linear(w);
        for (a, b) in out.data.iter_mut().zip(&lin.data) {
            *a += b;
        }
        Ok(out)
    }

    /// Transport factor `exp(-i c xi1 dt)` per `x1` slot.
    fn factor(&self, dt: f64) -> Vec<C> {
        (0..self.ctx.grid.n_x1)
            .map(|i| (C::new(0.0, -self.ray.c * self.ctx.grid.xi1(i) * dt)).exp())
            .collect()
    }

    fn scale_rows(s: &mut Spectrum, fac: &[C]) {
        let n2 = s.grid.n_theta;
        for (i, row) in s.data.chunks_exact_mut(n2).enumerate() {
            for v in row.iter_mut() {
                *v *= fac[i];
            }
        }
    }

    /// One Lawson (integrating factor) RK4 step from `state` over `dt`.
    pub fn step_rk4(&self, state: &AmplitudeState, dt: f64) -> Result<AmplitudeState> {
        let e = self.factor(0.5 * dt);
        let e2 = self.factor(dt);
        let t = state.t;
        let w = &state.what;

        let k1 = self.nonlinear(w, t)?;

        let mut a2 = w.clone();
        for (v, k) in a2.data.iter_mut().zip(&k1.data) {
            *v += 0.5 * dt * k;
        }
        Self::scale_rows(&mut a2, &e);
        let k2 = self.nonlinear(&a2, t + 0.5 * dt)?;

        let mut a3 = w.clone();
        Self::scale_rows(&mut a3, &e);
        for (v, k) in a3.data.iter_mut().zip(&k2.data) {
            *v += 0.5 * dt * k;
        }
        let k3 = self.nonlinear(&a3, t + 0.5 * dt)?;

        let mut a4 = w.clone();
        Self::scale_rows(&mut a4, &e2);
        let mut k3e = k3.clone();
        Self::scale_rows(&mut k3e, &e);
        for (v, k) in a4.data.iter_mut().zip(&k3e.data) {
            *v += dt * k;
        }
        let k4 = self.nonlinear(&a4, t + dt)?;

        let mut out = w.clone();
        Self::scale_rows(&mut out, &e2);
        let mut k1e = k1;
        Self::scale_rows(&mut k1e, &e2);
        let mut k2e = k2;
        Self::scale_rows(&mut k2e, &e);
        for idx in 0..out.data.len() {
            out.data[idx] += dt / 6.0
                * (k1e.data[idx] + 2.0 * k2e.data[idx] + 2.0 * k3e.data[idx] + k4.data[idx]);
        }
        symmetrize(&mut out);
        if out.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at t = {}", t + dt)));
        }
        Ok(AmplitudeState { t: t + dt, what: out })
    }

    /// Largest stable step suggested by the bilinear frequency scale
    /// `|pref| max|Lambda| sup|w|`.
    pub fn stable_dt(&self, w: &Spectrum) -> f64 {
        let lam_max = self.table.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let w_sup = self
            .ctx
            .inverse_c(w)
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max);
        let rate = lam_max * self.table.prefactor.abs() * w_sup;
        if rate > 0.0 {
            0.5 / rate
        } else {
            f64::INFINITY
        }
    }

    /// March from `w0` to `t_final`, logging norms each step.
    pub fn solve(&self, w0: Spectrum) -> Result<SolveOutput> {
        let n_steps = ((self.cfg.t_final / self.cfg.dt).round() as usize).max(1);
        let dt = self.cfg.t_final / n_steps as f64;
        let mut w0 = w0;
        if self.cfg.dealias {
            dealias(&mut w0);
        }
        let mut state = AmplitudeState { t: 0.0, what: w0 };
        let mut states = vec![state.clone()];
        let mut energy = Vec::with_capacity(n_steps + 1);
        let l2_of = |s: &Spectrum| singular_norm(s, 0.0, 0.0, 1.0, 1.0, 0.0);
        let hm_of = |s: &Spectrum| singular_norm(s, 0.0, self.cfg.m, self.cfg.gamma, 1.0, 0.0);
        let mut prev_l2 = l2_of(&state.what);
        energy.push(EnergyRow { t: 0.0, l2: prev_l2, hm: hm_of(&state.what), de: 0.0 });
        let mut blow_up = false;
        for step in 1..=n_steps {
            state = match self.step_rk4(&state, dt) {
                Ok(s) => s,
                Err(Error::Numerical(_)) => {
                    blow_up = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            state.t = step as f64 * dt;
            let l2 = l2_of(&state.what);
            energy.push(EnergyRow {
                t: state.t,
                l2,
                hm: hm_of(&state.what),
                de: (l2 - prev_l2) / dt,
            });
            prev_l2 = l2;
            if l2 > self.cfg.blowup_limit {
                blow_up = true;
                states.push(state.clone());
                break;
            }
            if step % self.cfg.save_every == 0 || step == n_steps {
                states.push(state.clone());
            }
        }
        Ok(SolveOutput { dt, states, energy, blow_up })
    }

    /// Time derivatives of `w_hat` of orders `1..=order` (at most 3),
    /// obtained by differentiating the evolution equation.
    pub fn time_derivatives(&self, w: &Spectrum, t: f64, order: usize) -> Result<Vec<Spectrum>> {
        if order == 0 || order > 3 {
            return Err(Error::Config("derivative order must be 1, 2, or 3".into()));
        }
        let add = |a: &mut Spectrum, b: &Spectrum, s: f64| {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += s * y;
            }
        };
        let hb = |u: &Spectrum, v: &Spectrum| -> Result<Spectrum> {
            Ok(hilbert(&bilinear_b(self.ctx, self.table, u, v, self.cfg.dealias)?))
        };
        let mut out = Vec::with_capacity(order);

        let mut d1 = self.linear(w);
        add(&mut d1, &hb(w, w)?, -1.0);
        if let Some(src) = self.source {
            add(&mut d1, &src.at(t), 1.0);
        }
        if self.cfg.dealias {
            dealias(&mut d1);
        }
        out.push(d1);

        if order >= 2 {
            let mut d2 = self.linear(&out[0]);
            add(&mut d2, &hb(w, &out[0])?, -2.0);
            if let Some(src) = self.source {
                add(&mut d2, &src.derivative_at(t, 1), 1.0);
            }
            if self.cfg.dealias {
                dealias(&mut d2);
            }
            out.push(d2);
        }
        if order >= 3 {
            let mut d3 = self.linear(&out[1]);
            add(&mut d3, &hb(&out[0], &out[0])?, -2.0);
            add(&mut d3, &hb(w, &out[1])?, -2.0);
            if let Some(src) = self.source {
                add(&mut d3, &src.derivative_at(t, 2), 1.0);
            }
            out.push(d3);
        }
        if self.cfg.dealias {
            for d in out.iter_mut() {
                dealias(d);
            }
        }
        Ok(out)
    }
}

/// Sobolev inner product `Re sum (xi^2 + gamma^2)^m a conj(b)` with the
/// Plancherel measure.
pub fn sobolev_inner(a: &Spectrum, b: &Spectrum, m: f64, gamma: f64) -> f64 {
    let g = a.grid;
    let meas = (2.0 * PI / g.l_x1) * (2.0 * PI / g.l_theta) / (2.0 * PI).powi(2);
    let mut total = 0.0;
    for i in 0..g.n_x1 {
        let xi1 = g.xi1(i);
        for j in 0..g.n_theta {
            let k = g.k_theta(j);
            let w = (xi1 * xi1 + k * k + gamma * gamma).powf(m);
            total += w * (a.data[i * g.n_theta + j] * b.data[i * g.n_theta + j].conj()).re;
        }
    }
    total * meas
}

/// Deterministic band-limited random spectrum with decay
/// `(1 + |m1| + |m2|)^{-decay}` and Hermitian symmetry; the band is fixed by
/// the caller so the same function exists on refined grids.
pub fn random_smooth_spectrum(
    grid: Grid2,
    seed: u64,
    band_x1: usize,
    band_theta: usize,
    decay: f64,
) -> Spectrum {
    // splitmix64 keyed by the mode pair, so values are grid independent
    let val = |m1: isize, m2: isize, lane: u64| -> f64 {
        let mut x = seed
            ^ (m1 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (m2 as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
            ^ lane.wrapping_mul(0x94d0_49bb_1331_11eb);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
        (x as f64 / u64::MAX as f64) * 2.0 - 1.0
    };
    let mut s = Spectrum::zeros(grid);
    for m1 in -(band_x1 as isize)..=(band_x1 as isize) {
        let Some(i) = fft_slot(m1, grid.n_x1) else { continue };
        for m2 in -(band_theta as isize)..=(band_theta as isize) {
            if m2 == 0 {
                continue;
            }
            let Some(j) = fft_slot(m2, grid.n_theta) else { continue };
            let amp = (1.0 + m1.unsigned_abs() as f64 + m2.unsigned_abs() as f64).powf(-decay);
            s.data[i * grid.n_theta + j] = amp * C::new(val(m1, m2, 1), val(m1, m2, 2));
        }
    }
    symmetrize(&mut s);
    s
}

/// Random spectrum whose fast-frequency profile is enriched at low
/// frequencies: `|k|^-alpha` with a smooth rolloff above `k0`, band-limited
/// and mildly decaying in the slow frequency. Low-frequency content at this
/// strength is what makes the weighted surface norms fill their quoted
/// rates; band-limited data sits strictly below them.
pub fn low_k_spectrum(
    grid: Grid2,
    seed: u64,
    band_x1: usize,
    band_theta: usize,
    alpha: f64,
    k0: f64,
) -> Spectrum {
    let val = |m1: isize, m2: isize, lane: u64| -> f64 {
        let mut x = seed
            ^ (m1 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (m2 as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
            ^ lane.wrapping_mul(0x94d0_49bb_1331_11eb);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
        (x as f64 / u64::MAX as f64) * 2.0 - 1.0
    };
    let mut s = Spectrum::zeros(grid);
    let half = (grid.n_theta as isize / 2 - 1).min(band_theta as isize);
    for m1 in -(band_x1 as isize)..=(band_x1 as isize) {
        let Some(i) = fft_slot(m1, grid.n_x1) else { continue };
        for m2 in -half..=half {
            if m2 == 0 {
                continue;
            }
            let Some(j) = fft_slot(m2, grid.n_theta) else { continue };
            let k = 2.0 * std::f64::consts::PI * m2 as f64 / grid.l_theta;
            let amp = k.abs().powf(-alpha)
                * (-(k / k0) * (k / k0)).exp()
                * (1.0 + m1.unsigned_abs() as f64).powf(-1.0);
            s.data[i * grid.n_theta + j] = amp * C::new(val(m1, m2, 1), val(m1, m2, 2));
        }
    }
    symmetrize(&mut s);
    s
}

#[derive(Debug, Clone, Copy)]
pub struct TrilinearSample {
    /// `|B(u, v)|_m / (|u|_m |v|_m0 + |u|_m0 |v|_m)`.
    pub tame: f64,
    /// `|<B(u, u), u>_m| / (|u|_m0 |u|_m^2)`.
    pub energy: f64,
}

/// Ratios probing the tame product bound and the energy cancellation of the
/// bilinear term on random band-limited samples.
pub fn trilinear_check(
    ctx: &SpectralCtx,
    table: &KernelTable,
    m: f64,
    m0: f64,
    gamma: f64,
    n_samples: usize,
    seed: u64,
    band_x1: usize,
    band_theta: usize,
) -> Result<Vec<TrilinearSample>> {
    let norm = |s: &Spectrum, idx: f64| singular_norm(s, 0.0, idx, gamma, 1.0, 0.0);
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let u =
            random_smooth_spectrum(ctx.grid, seed.wrapping_add(2 * i as u64), band_x1, band_theta, m0 + 1.0);
        let v = random_smooth_spectrum(
            ctx.grid,
            seed.wrapping_add(2 * i as u64 + 1),
            band_x1,
            band_theta,
            m0 + 1.0,
        );
        let buv = bilinear_b(ctx, table, &u, &v, false)?;
        let buu = bilinear_b(ctx, table, &u, &u, false)?;
        let (um, um0) = (norm(&u, m), norm(&u, m0));
        let (vm, vm0) = (norm(&v, m), norm(&v, m0));
        let tame = norm(&buv, m) / (um * vm0 + um0 * vm);
        let energy = sobolev_inner(&buu, &u, m, gamma).abs() / (um0 * um * um);
        out.push(TrilinearSample { tame, energy });
    }
    Ok(out)
}

/// Writes the energy log as CSV with columns `t,l2,hm,de`.
pub fn write_energy_csv(path: &Path, rows: &[EnergyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    w.write_record(["t", "l2", "hm", "de"]).map_err(|e| Error::Config(e.to_string()))?;
    for r in rows {
        w.write_record([
            format!("{:.17e}", r.t),
            format!("{:.17e}", r.l2),
            format!("{:.17e}", r.hm),
            format!("{:.17e}", r.de),
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Binary trajectory checkpoints: grid header, then `(t, spectrum)` records,
/// all little endian.
pub fn write_trajectory(path: &Path, states: &[AmplitudeState]) -> Result<()> {
    let grid = states
        .first()
        .ok_or_else(|| Error::Config("empty trajectory".into()))?
        .what
        .grid;
    let mut buf = Vec::new();
    buf.extend_from_slice(b"RPTJ");
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(grid.n_x1 as u64).to_le_bytes());
    buf.extend_from_slice(&(grid.n_theta as u64).to_le_bytes());
    buf.extend_from_slice(&grid.l_x1.to_le_bytes());
    buf.extend_from_slice(&grid.l_theta.to_le_bytes());
    buf.extend_from_slice(&(states.len() as u64).to_le_bytes());
    for st in states {
        buf.extend_from_slice(&st.t.to_le_bytes());
        for v in &st.what.data {
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<AmplitudeState>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 48 || &buf[0..4] != b"RPTJ" {
        return Err(Error::Config(format!("not a trajectory file: {}", path.display())));
    }
    let rd_u64 = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let rd_f = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    if u32::from_le_bytes(buf[4..8].try_into().unwrap()) != 1 {
        return Err(Error::Config("unsupported trajectory version".into()));
    }
    let n_x1 = rd_u64(8) as usize;
    let n_theta = rd_u64(16) as usize;
    let grid = Grid2::new(n_x1, rd_f(24), n_theta, rd_f(32))?;
    let count = rd_u64(40) as usize;
    let rec = 8 + 16 * grid.len();
    if buf.len() != 48 + count * rec {
        return Err(Error::Config("trajectory file truncated".into()));
    }
    let mut states = Vec::with_capacity(count);
    for c in 0..count {
        let base = 48 + c * rec;
        let t = rd_f(base);
        let mut data = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            data.push(C::new(rd_f(base + 8 + 16 * i), rd_f(base + 16 + 16 * i)));
        }
        states.push(AmplitudeState { t, what: Spectrum { grid, data } });
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_kernel_table, CubicCoefficients};
    use crate::material::{solve_rayleigh, wave_speeds};
    use approx::assert_abs_diff_eq;

    fn setup(n_x1: usize, n_theta: usize) -> (RayleighData, Grid2, SpectralCtx, KernelTable) {
        let mat = wave_speeds(1.0, 1.0).unwrap();
        let ray = solve_rayleigh(&mat).unwrap();
        let grid = Grid2::new(n_x1, 40.0, n_theta, 2.0 * PI * 5.0).unwrap();
        let ctx = SpectralCtx::new(grid);
        let cc = CubicCoefficients::svk(1.0, 1.0);
        let table =
            build_kernel_table(&ray, 1.0, 1.0, &cc, n_theta, grid.l_theta, None).unwrap();
        (ray, grid, ctx, table)
    }

    fn zero_table(grid: Grid2, table: &KernelTable) -> KernelTable {
        let mut t = table.clone();
        let _ = grid;
        for v in t.values.iter_mut() {
            *v = C::new(0.0, 0.0);
        }
        t
    }

    #[test]
    fn zero_data_stays_zero() {
        let (ray, grid, ctx, table) = setup(8, 32);
        let cfg = SolverConfig::new(0.05, 0.5);
        let solver = Solver::new(cfg, &ctx, &ray, &table, None).unwrap();
        let out = solver.solve(Spectrum::zeros(grid)).unwrap();
        assert!(!out.blow_up);
        let last = &out.states.last().unwrap().what;
        assert!(last.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn bilinear_matches_double_sum_oracle() {
        // Independent route: full spectral double convolution in (xi1, k)
        // with the circular x1 wrap the pointwise product implies.
        let (ray, grid, ctx, table) = setup(8, 16);
        let _ = ray;
        let u = random_smooth_spectrum(grid, 7, 3, 5, 2.0);
        let v = random_smooth_spectrum(grid, 8, 3, 5, 2.0);
        let fast = bilinear_b(&ctx, &table, &u, &v, false).unwrap();
        let (n1, n2) = (grid.n_x1, grid.n_theta);
        let pref = table.prefactor * 2.0 * PI / grid.l_theta;
        let mut worst = 0.0f64;
        for i in 0..n1 {
            for jk in 0..n2 {
                let mk = Grid2::mode(jk, n2);
                let mut acc = C::new(0.0, 0.0);
                if mk != 0 {
                    for i2 in 0..n1 {
                        let idiff = (i + n1 - i2) % n1; // circular in x1
                        for jx in 0..n2 {
                            let mx = Grid2::mode(jx, n2);
                            if mx == 0 || mx == mk {
                                continue;
                            }
                            if let Some(sd) = fft_slot(mk - mx, n2) {
                                acc += table.lambda_at(mk - mx, mx)
                                    * u.data[idiff * n2 + sd]
                                    * v.data[i2 * n2 + jx];
                            }
                        }
                    }
                }
                let expect = pref * acc / grid.l_x1;
                worst = worst.max((fast.data[i * n2 + jk] - expect).norm());
            }
        }
        assert!(worst < 1e-12, "oracle mismatch {worst}");
    }

    #[test]
    fn bilinear_is_symmetric_and_real_valued() {
        let (ray, grid, ctx, table) = setup(8, 32);
        let _ = ray;
        let u = random_smooth_spectrum(grid, 21, 3, 8, 2.0);
        let v = random_smooth_spectrum(grid, 22, 3, 8, 2.0);
        let buv = bilinear_b(&ctx, &table, &u, &v, true).unwrap();
        let bvu = bilinear_b(&ctx, &table, &v, &u, true).unwrap();
        let worst = buv
            .data
            .iter()
            .zip(&bvu.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12);
        assert!(buv.hermitian_defect() < 1e-12);
    }

    #[test]
    fn transport_limit_is_exact() {
        let (ray, grid, ctx, table) = setup(16, 16);
        let zt = zero_table(grid, &table);
        let cfg = SolverConfig::new(0.1, 1.0);
        let solver = Solver::new(cfg, &ctx, &ray, &zt, None).unwrap();
        let w0 = random_smooth_spectrum(grid, 3, 4, 4, 2.0);
        let out = solver.solve(w0.clone()).unwrap();
        let last = &out.states.last().unwrap().what;
        let mut worst = 0.0f64;
        for i in 0..grid.n_x1 {
            let phase = (C::new(0.0, -ray.c * grid.xi1(i) * 1.0)).exp();
            for j in 0..grid.n_theta {
                let expect = phase * w0.data[i * grid.n_theta + j];
                worst = worst.max((last.data[i * grid.n_theta + j] - expect).norm());
            }
        }
        assert!(worst < 1e-10, "transport error {worst}");
    }

    #[test]
    fn rk4_order_on_forced_linear_problem() {
        // Zero kernel so the only discretization error is the Duhamel
        // quadrature; Richardson against a fine reference gives order 4.
        let (ray, grid, ctx, table) = setup(16, 16);
        let zt = zero_table(grid, &table);
        let force = Field::from_fn(grid, |x, th| {
            (-0.05 * x * x).exp() * (-0.1 * th * th).exp() * (0.2 * th).cos()
        });
        let src = source_g(
            &ray,
            &ctx,
            [&force, &force],
            Envelope::Gaussian { amp: 0.5, t0: 0.5, sigma: 0.3 },
        );
        let run = |dt: f64| {
            let cfg = SolverConfig::new(dt, 1.0);
            let solver = Solver::new(cfg, &ctx, &ray, &zt, Some(&src)).unwrap();
            solver.solve(Spectrum::zeros(grid)).unwrap().states.last().unwrap().what.clone()
        };
        let reference = run(1.0 / 512.0);
        let err = |s: &Spectrum| {
            s.data
                .iter()
                .zip(&reference.data)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        let e1 = err(&run(1.0 / 16.0));
        let e2 = err(&run(1.0 / 32.0));
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.1, "observed order {order}");
    }

    #[test]
    fn reality_and_zero_mean_preserved() {
        let (ray, grid, ctx, table) = setup(8, 32);
        let force = Field::from_fn(grid, |x, th| (-0.05 * x * x - 0.2 * th * th).exp() * th.cos());
        let src = source_g(
            &ray,
            &ctx,
            [&force, &force],
            Envelope::Gaussian { amp: 0.05, t0: 0.4, sigma: 0.25 },
        );
        let cfg = SolverConfig::new(0.02, 0.6);
        let solver = Solver::new(cfg, &ctx, &ray, &table, Some(&src)).unwrap();
        let out = solver.solve(random_smooth_spectrum(grid, 5, 2, 6, 3.0)).unwrap();
        assert!(!out.blow_up);
        let last = &out.states.last().unwrap().what;
        assert!(last.hermitian_defect() < 1e-12);
        for i in 0..grid.n_x1 {
            // k = 0 row: the theta mean stays whatever transport makes of it;
            // with zero-mean data it stays zero.
            assert!(last.data[i * grid.n_theta].norm() < 1e-12);
        }
        assert!(out.energy.iter().all(|r| r.l2.is_finite() && r.hm.is_finite()));
    }

    #[test]
    fn self_convergence_under_theta_doubling() {
        // The forcing is a trig polynomial below the coarse dealias cutoff,
        // sampled exactly on both grids, so only the fast-variable truncation
        // of the nonlinear cascade differs between runs.
        let run = |n_theta: usize| {
            let (ray, grid, ctx, table) = setup(8, n_theta);
            let force = Field::from_fn(grid, |x, th| {
                let sx = 0.5 + 0.5 * (2.0 * PI * x / grid.l_x1).cos();
                let sth: f64 = (1..=6)
                    .map(|m| (-0.3 * (m * m) as f64).exp() * (m as f64 * 2.0 * PI * th / grid.l_theta).cos())
                    .sum();
                sx * sx * sth
            });
            let src = source_g(
                &ray,
                &ctx,
                [&force, &force],
                Envelope::Gaussian { amp: 0.001, t0: 0.4, sigma: 0.25 },
            );
            let cfg = SolverConfig::new(0.005, 0.5);
            let solver = Solver::new(cfg, &ctx, &ray, &table, Some(&src)).unwrap();
            (grid, solver.solve(Spectrum::zeros(grid)).unwrap().states.last().unwrap().what.clone())
        };
        let (g1, coarse) = run(32);
        let (g2, fine) = run(64);
        // Compare on the modes the coarse run keeps after dealiasing.
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..g1.n_x1 {
            for j in 0..g1.n_theta {
                let m2 = Grid2::mode(j, g1.n_theta);
                if 3 * m2.unsigned_abs() > g1.n_theta {
                    continue;
                }
                let jf = fft_slot(m2, g2.n_theta).unwrap();
                let d = coarse.data[i * g1.n_theta + j] - fine.data[i * g2.n_theta + jf];
                num += d.norm_sqr();
                den += fine.data[i * g2.n_theta + jf].norm_sqr();
            }
        }
        assert!((num / den.max(1e-300)).sqrt() < 1e-8, "rel diff {}", (num / den).sqrt());
    }

    #[test]
    fn time_derivative_formulas_match_finite_differences() {
        let (ray, grid, ctx, table) = setup(8, 32);
        let force = Field::from_fn(grid, |x, th| (-0.05 * x * x - 0.2 * th * th).exp() * th.cos());
        let src = source_g(
            &ray,
            &ctx,
            [&force, &force],
            Envelope::Gaussian { amp: 0.1, t0: 0.0, sigma: 0.5 },
        );
        let cfg = SolverConfig::new(1e-3, 1.0);
        let solver = Solver::new(cfg, &ctx, &ray, &table, Some(&src)).unwrap();
        let w = random_smooth_spectrum(grid, 11, 2, 6, 3.0);
        let t0 = 0.2;
        let state = AmplitudeState { t: t0, what: w.clone() };
        let dt = 1e-3;
        let fwd = solver.step_rk4(&state, dt).unwrap().what;
        let bwd = solver.step_rk4(&state, -dt).unwrap().what;
        let ders = solver.time_derivatives(&w, t0, 2).unwrap();
        let scale = ders[0].data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut worst1 = 0.0f64;
        let mut worst2 = 0.0f64;
        for idx in 0..w.data.len() {
            let fd1 = (fwd.data[idx] - bwd.data[idx]) / (2.0 * dt);
            let fd2 = (fwd.data[idx] - 2.0 * w.data[idx] + bwd.data[idx]) / (dt * dt);
            worst1 = worst1.max((fd1 - ders[0].data[idx]).norm());
            worst2 = worst2.max((fd2 - ders[1].data[idx]).norm());
        }
        assert!(worst1 < 1e-6 * scale.max(1.0), "first derivative off by {worst1}");
        assert!(worst2 < 1e-3 * scale.max(1.0), "second derivative off by {worst2}");
    }

    #[test]
    fn trilinear_ratios_finite() {
        let (_, grid, ctx, table) = setup(8, 32);
        let _ = grid;
        let samples = trilinear_check(&ctx, &table, 6.0, 3.0, 1.0, 10, 99, 2, 6).unwrap();
        assert_eq!(samples.len(), 10);
        for s in samples {
            assert!(s.tame.is_finite() && s.tame > 0.0);
            assert!(s.energy.is_finite());
        }
    }

    #[test]
    fn trajectory_round_trips() {
        let (ray, grid, ctx, table) = setup(8, 16);
        let cfg = SolverConfig::new(0.1, 0.3);
        let solver = Solver::new(cfg, &ctx, &ray, &table, None).unwrap();
        let out = solver.solve(random_smooth_spectrum(grid, 4, 2, 4, 2.0)).unwrap();
        let dir = std::env::temp_dir().join("rp-traj-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.bin");
        write_trajectory(&path, &out.states).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), out.states.len());
        for (a, b) in back.iter().zip(&out.states) {
            assert_abs_diff_eq!(a.t, b.t);
            assert!(a.what.data.iter().zip(&b.what.data).all(|(x, y)| x == y));
        }
    }
}
