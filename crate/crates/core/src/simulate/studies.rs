use std::f64::consts::{PI, TAU};

use rustfft::{num_complex::Complex, FftPlanner};

use super::{run, EtaSpec, FieldInit, RunOptions, Scenario};
use crate::coupled::CoupledSystem;
use crate::error::{Error, Result};
use crate::kg_field::{deposit_point, FieldState, GridSpec, KgSolver, SourceGrid};
use crate::lagrangian::{action, ActionSetup};
use crate::util::{convergence_order, pairwise_sum};

const CG_TOLERANCE: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&p)
}

/// Conjugate gradients for the static operator `-D(cx D phi) + cm M^2 phi = b`.
fn conjugate_gradient(solver: &KgSolver, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut rr = dot(&r, &r);
    for _ in 0..(20 * n).max(1000) {
        solver.apply_static(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() < CG_TOLERANCE * bnorm {
            // confirm with the true residual
            solver.apply_static(&x, &mut ap);
            let res: Vec<f64> = ap.iter().zip(b).map(|(a, b)| a - b).collect();
            if dot(&res, &res).sqrt() < CG_TOLERANCE * bnorm {
                return Ok(x);
            }
            r = b.iter().zip(&ap).map(|(b, a)| b - a).collect();
            p = r.clone();
            rr = dot(&r, &r);
            continue;
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::NonConvergence(format!(
        "static solve did not reach relative residual {CG_TOLERANCE:e}"
    )))
}

/// Static field of the pinned particle, as a nodal array.
pub(super) fn static_field(sc: &Scenario, sys: &CoupledSystem) -> Result<Vec<f64>> {
    let grid = sys.grid();
    let Some((x, _)) = sc.particle_xv()? else {
        return Err(Error::config("initial.particle", "static solve needs a particle"));
    };
    if !(sc.physics.field_mass > 0.0) {
        return Err(Error::Domain("static solve needs a positive field mass".into()));
    }
    if sc.physics.eps == 0.0 {
        return Ok(vec![0.0; grid.len()]);
    }
    let (s0, _) = sys.continuum_norm(0.0, &x, &[0.0; 3])?;
    let mut src = SourceGrid::zeros(grid, 0.0);
    deposit_point(grid, &sys.metric, &sys.kernel, &x, sc.physics.eps * s0, 0.0, &mut src)?;
    let cm = &sys.solver.coeffs.cm;
    let b: Vec<f64> = src.rho.iter().zip(cm).map(|(r, c)| -c * r).collect();
    conjugate_gradient(&sys.solver, &b)
}

/// Equilibrium field of a pinned particle.
pub fn solve_static_yukawa(sc: &Scenario) -> Result<FieldState> {
    sc.validate()?;
    let sys = sc.system()?;
    let phi = static_field(sc, &sys)?;
    Ok(FieldState {
        pi: vec![0.0; phi.len()],
        phi,
        t: 0.0,
    })
}

/// Comparison of a static profile with the continuum Green function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YukawaCheck {
    pub max_rel_error: f64,
    pub samples: usize,
    pub r_min: f64,
    pub r_max: f64,
}

/// Largest relative deviation from `-eps e^{-M r} / (2M)` (d = 1) or
/// `-eps e^{-M r} / (4 pi r)` (d = 3) over nodes with `r_min <= r <= r_max`.
pub fn yukawa_profile_error(sc: &Scenario, phi: &[f64], r_min: f64, r_max: f64) -> Result<YukawaCheck> {
    let grid = &sc.grid;
    let (x, _) = sc
        .particle_xv()?
        .ok_or_else(|| Error::config("initial.particle", "profile check needs a particle"))?;
    let (mass, eps) = (sc.physics.field_mass, sc.physics.eps);
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    for (idx, &value) in phi.iter().enumerate() {
        let m = grid.multi_index(idx);
        let r = (0..grid.d)
            .map(|a| grid.displacement(a, grid.node_coord(a, m[a]), x[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        if r < r_min || r > r_max {
            continue;
        }
        let exact = match grid.d {
            1 => -eps / (2.0 * mass) * (-mass * r).exp(),
            3 => -eps / (4.0 * PI * r) * (-mass * r).exp(),
            d => return Err(Error::Unsupported(format!("no closed-form Green function for d = {d}"))),
        };
        worst = worst.max(((value - exact) / exact).abs());
        samples += 1;
    }
    Ok(YukawaCheck {
        max_rel_error: worst,
        samples,
        r_min,
        r_max,
    })
}

/// Measured against expected frequency of one standing mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DispersionMode {
    pub mode: i64,
    pub k: f64,
    pub mass: f64,
    pub omega_measured: f64,
    pub omega_exact: f64,
    pub rel_error: f64,
}

/// Peak angular frequency of a uniformly sampled signal (Hann window,
/// parabolic interpolation on the log magnitude).
pub fn peak_frequency(signal: &[f64], dt: f64) -> f64 {
    let n = signal.len();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = 0.5 - 0.5 * (TAU * i as f64 / (n - 1) as f64).cos();
            Complex::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
    let k = (1..mag.len() - 1)
        .max_by(|&a, &b| mag[a].total_cmp(&mag[b]))
        .unwrap_or(1);
    let (a, b, c) = (mag[k - 1].ln(), mag[k].ln(), mag[k + 1].ln());
    let denom = a - 2.0 * b + c;
    let shift = if denom != 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    TAU * (k as f64 + shift) / (n as f64 * dt)
}

/// Standing-wave frequencies for each `(mode, field mass)` pair, measured from
/// the field at the first node.
pub fn dispersion_study(sc: &Scenario, modes: &[(i64, f64)]) -> Result<Vec<DispersionMode>> {
    let mut out = Vec::with_capacity(modes.len());
    for &(mode, mass) in modes {
        let mut s = sc.clone();
        s.physics.field_mass = mass;
        s.initial.particle = None;
        s.initial.field = vec![FieldInit::PlaneWave { mode, amplitude: 1.0, traveling: false }];
        s.outputs.probes = vec![vec![s.grid.node_coord(0, 0)]];
        s.outputs.snapshot_every = 0;
        let sys = s.system()?;
        let (phi, dot) = super::run::initial_field(&s, &sys)?;
        let mut state = sys.init(phi, &dot, None, 0.0)?;
        let mut series = Vec::with_capacity(s.steps() + 1);
        for _ in 0..=s.steps() {
            series.push(state.field.phi[0]);
            sys.step(&mut state)?;
        }
        let k = TAU * mode as f64 / s.grid.extents[0];
        let omega_exact = (k * k + mass * mass).sqrt();
        let omega_measured = peak_frequency(&series, s.dt);
        out.push(DispersionMode {
            mode,
            k,
            mass,
            omega_measured,
            omega_exact,
            rel_error: ((omega_measured - omega_exact) / omega_exact).abs(),
        });
    }
    Ok(out)
}

/// L2 errors of a traveling plane wave against the exact solution on a
/// refinement ladder with `dt = h/2`; returns `(spacings, errors, order)`.
pub fn plane_wave_convergence(ns: &[usize], extent: f64, mode: i64, mass: f64, t_end: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    let k = TAU * mode as f64 / extent;
    let omega = (k * k + mass * mass).sqrt();
    for &n in ns {
        let grid = GridSpec::periodic_cube(1, extent, n);
        let h = grid.spacing(0);
        let dt = 0.5 * h;
        let solver = KgSolver::new(&grid, &crate::geometry::Metric::minkowski(1), mass, dt)?;
        let xs: Vec<f64> = (0..n).map(|i| grid.node_coord(0, i)).collect();
        let phi: Vec<f64> = xs.iter().map(|x| (k * x).cos()).collect();
        let dot: Vec<f64> = xs.iter().map(|x| omega * (k * x).sin()).collect();
        let src = SourceGrid::zeros(&grid, 0.0);
        let mut s = solver.initial_state(phi, &dot, &src, 0.0);
        let steps = (t_end / dt).round() as usize;
        for _ in 0..steps {
            let src = SourceGrid::zeros(&grid, s.t);
            s = solver.step(&s, &src)?;
        }
        let diff: Vec<f64> = xs.iter().zip(&s.phi).map(|(x, p)| p - (k * x - omega * s.t).cos()).collect();
        hs.push(h);
        errs.push(crate::kg_field::l2_norm(&grid, &diff));
    }
    let order = convergence_order(&hs, &errs);
    Ok((hs, errs, order))
}

/// Deviation between two runs that differ only in the covariance field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtaReport {
    /// Largest physical position difference over the run.
    pub trajectory: f64,
    /// Relative action difference.
    pub action: f64,
    pub action_reference: f64,
}

/// Runs `sc` under two covariance fields and compares the physical outputs.
pub fn eta_invariance_test(sc: &Scenario, eta1: &EtaSpec, eta2: &EtaSpec) -> Result<EtaReport> {
    let mut results = Vec::new();
    for eta in [eta1, eta2] {
        let mut s = sc.clone();
        s.eta = eta.clone();
        s.outputs.snapshot_every = 0;
        let rec = run(&s, RunOptions { keep_history: true, sem: false })?;
        if let Some(f) = &rec.failure {
            return Err(Error::Divergence(format!("run under {eta:?} failed: {f}")));
        }
        let setup = ActionSetup {
            grid: s.grid.clone(),
            metric: s.metric()?,
            eta: s.eta()?,
            kernel: s.kernel,
            mass: s.physics.field_mass,
            suspension: s.suspension(),
        };
        let a = action(&setup, &rec.fields, rec.worldline.as_ref())?;
        results.push((rec, a));
    }
    let (r1, a1) = &results[0];
    let (r2, a2) = &results[1];
    let mut dev: f64 = 0.0;
    for (p, q) in r1.trajectory.iter().zip(&r2.trajectory) {
        for i in 0..sc.grid.d {
            dev = dev.max((p.x[i] - q.x[i]).abs());
        }
    }
    Ok(EtaReport {
        trajectory: dev,
        action: (a1 - a2).abs() / a1.abs().max(f64::MIN_POSITIVE),
        action_reference: *a1,
    })
}

/// Runs a field-only scenario forward `steps` steps, reverses the velocity
/// and runs back. Returns the L2 distance to the initial field relative to
/// its norm.
pub fn time_reversal_probe(sc: &Scenario, steps: usize) -> Result<f64> {
    let mut s = sc.clone();
    s.initial.particle = None;
    s.initial.field.retain(|f| *f != FieldInit::Yukawa);
    let sys = s.system()?;
    let (phi, dot) = super::run::initial_field(&s, &sys)?;
    let mut state = sys.init(phi, &dot, None, 0.0)?;
    let start = state.field.phi.clone();
    for _ in 0..steps {
        sys.step(&mut state)?;
    }
    // pi^{n+1/2} of the next step, negated, starts the backward leg at phi^n
    let mut probe = state.clone();
    sys.step(&mut probe)?;
    state.field.pi = probe.field.pi.iter().map(|p| -p).collect();
    for _ in 0..steps {
        sys.step(&mut state)?;
    }
    let diff: Vec<f64> = state.field.phi.iter().zip(&start).map(|(a, b)| a - b).collect();
    let grid = sys.grid();
    let norm = crate::kg_field::l2_norm(grid, &start);
    Ok(crate::kg_field::l2_norm(grid, &diff) / norm.max(f64::MIN_POSITIVE))
}

/// Static solve plus the profile comparison over the default window:
/// three kernel widths out to a quarter of the box in 1D, outside the kernel
/// support in 3D.
pub fn yukawa_check(sc: &Scenario) -> Result<(FieldState, YukawaCheck)> {
    let state = solve_static_yukawa(sc)?;
    let h = sc.grid.min_spacing();
    let l = sc.grid.extents.iter().cloned().fold(f64::INFINITY, f64::min);
    let support = sc.kernel.support_radius() * h * (sc.grid.d as f64).sqrt();
    let r_min = match sc.grid.d {
        1 => 3.0 * sc.kernel.width * h,
        _ => support,
    };
    let check = yukawa_profile_error(sc, &state.phi, r_min, 0.25 * l)?;
    Ok((state, check))
}
