//! Calibration run for the residual sweep: builds low-frequency-enriched
//! data on a production-size grid, runs the sweep, and prints the realized
//! power-law fits next to the predictions.

use rayleigh_pulse::corrector::{w_tables, BoundarySource, CorrectorEngine, CutoffSpec};
use rayleigh_pulse::kernels::{build_kernel_table, CubicCoefficients};
use rayleigh_pulse::material::{solve_rayleigh, wave_speeds};
use rayleigh_pulse::residual::{build_bundles, run_sweep, ResidualEngine, SweepConfig};
use rayleigh_pulse::solver::{low_k_spectrum, source_g, Envelope, Solver, SolverConfig};
use rayleigh_pulse::spectral::{Grid2, SpectralCtx};
use rayleigh_pulse::svk::SVKModel;

fn main() {
    let t0 = std::time::Instant::now();
    let mat = wave_speeds(1.0, 1.0).unwrap();
    let ray = solve_rayleigh(&mat).unwrap();
    let grid = Grid2::new(16, 40.0, 256, 250.0).unwrap();
    let ctx = SpectralCtx::new(grid);
    let model = SVKModel::svk_tensors(&mat);
    let engine = CorrectorEngine::new(&ctx, &ray, &model).unwrap();
    let re = ResidualEngine::new(&ctx, &model, &engine);

    // Data consistent with the amplitude evolution: the time-derivative
    // tables come from the evolution equation itself, so the surface
    // solvability component vanishes along the construction. Band-limited
    // so cubic products stay on the grid.
    let env = Envelope::Gaussian { amp: 0.6, t0: 1.0, sigma: 0.9 };
    let fb = [low_k_spectrum(grid, 201, 2, 40, 0.5, 0.5), low_k_spectrum(grid, 202, 2, 40, 0.5, 0.5)];
    let f1 = ctx.inverse(&fb[0]);
    let f2 = ctx.inverse(&fb[1]);
    let cc = CubicCoefficients::svk(1.0, 1.0);
    let table = build_kernel_table(&ray, 1.0, 1.0, &cc, grid.n_theta, grid.l_theta, None).unwrap();
    let src_w = source_g(&ray, &ctx, [&f1, &f2], env);
    let mut scfg = SolverConfig::new(1e-3, 1.0);
    scfg.dealias = false;
    let solver = Solver::new(scfg, &ctx, &ray, &table, Some(&src_w)).unwrap();
    let t = 0.4;
    let w = low_k_spectrum(grid, 101, 2, 40, 0.5, 0.5);
    let ders = solver.time_derivatives(&w, t, 3).unwrap();
    let mut specs = vec![w];
    specs.extend(ders);
    let wt = w_tables(&ctx, &specs, t);
    let src = BoundarySource { base: fb, envelope: env };
    let bn = build_bundles(&engine, &ctx, wt, &src).unwrap();
    println!("bundles built in {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = SweepConfig {
        eps_list: (3..=8).map(|j| 0.5f64.powi(j)).collect(),
        cutoff: CutoffSpec { b_exp: 0.4, ..CutoffSpec::default() },
        ..SweepConfig::default()
    };
    let report = run_sweep(&re, &bn, &cfg).unwrap();
    println!("sweep done in {:.1}s", t0.elapsed().as_secs_f64());
    println!("identity defect max {:.3e}", report.identity_defect_max);
    println!("imag defect max {:.3e}", report.imag_defect_max);
    for e in &report.errors {
        println!("error: {e}");
    }
    println!("{:<34} {:>9} {:>9} {:>7} {:>6}", "name", "pred", "fit", "r2", "pass");
    for f in &report.fits {
        println!(
            "{:<34} {:>9.3} {:>9.3} {:>7.4} {:>6}",
            f.name, f.predicted, f.fitted, f.r_squared, f.pass
        );
    }
    // Raw values for every row name, for menu calibration.
    let mut names: Vec<String> = report.rows.iter().map(|r| r.name.clone()).collect();
    names.sort();
    names.dedup();
    for name in &names {
        let mut vals: Vec<(f64, f64)> = report
            .rows
            .iter()
            .filter(|r| &r.name == name)
            .map(|r| (r.eps, r.value))
            .collect();
        vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let slopes: Vec<String> = vals
            .windows(2)
            .map(|w| format!("{:+.2}", (w[1].1 / w[0].1).ln() / (w[1].0 / w[0].0).ln()))
            .collect();
        println!("raw {name:<34} slopes {}", slopes.join(" "));
    }
}
