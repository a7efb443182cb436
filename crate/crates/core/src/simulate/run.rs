use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{studies::static_field, FieldInit, Scenario};
use crate::coupled::{CoupledState, CoupledSystem, StepReport};
use crate::error::Result;
use crate::kg_field::FieldState;
use crate::lagrangian::{suspension_quadrature, variational_residuals, ActionSetup, Variation, Worldline};
use crate::geometry::ZERO_MAT;
use crate::sem::{assemble, kg_sem, minkowski_theta, sem_divergence, total_momentum, SemGrid, WorldlinePoint};

/// What to retain while running.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every field level (needed for action evaluation).
    pub keep_history: bool,
    /// Assemble the SEM tensor at every level and audit its divergence.
    pub sem: bool,
}

/// Particle data at one field level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub node_norm: f64,
    pub phi: f64,
}

/// One row of `diagnostics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostic {
    pub step: usize,
    pub t: f64,
    pub momentum: [f64; 4],
    pub field_energy: f64,
    pub div_l2: f64,
    pub div_linf: f64,
}

/// Snapshot of one level with both half-step time derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub state: FieldState,
    pub pi_plus: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub scenario: Scenario,
    pub times: Vec<f64>,
    pub trajectory: Vec<TrajectoryRow>,
    pub diagnostics: Vec<Diagnostic>,
    pub snapshots: Vec<Snapshot>,
    /// `probes[p][level]`.
    pub probes: Vec<Vec<f64>>,
    /// Total `P^mu` at every level (SEM runs only).
    pub momentum: Vec<[f64; 4]>,
    pub fields: Vec<FieldState>,
    pub worldline: Option<Worldline>,
    pub newton_iterations: usize,
    /// Set when the run stopped early.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn max_divergence_l2(&self) -> f64 {
        self.diagnostics.iter().fold(0.0f64, |m, d| m.max(d.div_l2))
    }

    /// Divergence norm averaged over diagnostic rows.
    pub fn mean_divergence_l2(&self) -> f64 {
        let v: Vec<f64> = self.diagnostics.iter().map(|d| d.div_l2).filter(|v| v.is_finite()).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Initial `phi` and `d phi / dt` on the grid.
pub(super) fn initial_field(sc: &Scenario, sys: &CoupledSystem) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = sys.grid();
    let n = grid.len();
    let d = grid.d;
    let mut phi = vec![0.0; n];
    let mut dot = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let gaussian = |phi: &mut [f64], dot: &mut [f64], amp: f64, c: &[f64], w: f64, vel: f64| {
        for idx in 0..n {
            let m = grid.multi_index(idx);
            let mut r2 = 0.0;
            let mut dx0 = 0.0;
            for a in 0..d {
                let dx = grid.displacement(a, grid.node_coord(a, m[a]), c[a]);
                if a == 0 {
                    dx0 = dx;
                }
                r2 += dx * dx;
            }
            let f = amp * (-0.5 * r2 / (w * w)).exp();
            phi[idx] += f;
            // phi(x - vel t): d/dt = -vel d/dx
            dot[idx] += vel * dx0 / (w * w) * f;
        }
    };
    for init in &sc.initial.field {
        match init {
            FieldInit::PlaneWave { mode, amplitude, traveling } => {
                let k = std::f64::consts::TAU * *mode as f64 / grid.extents[0];
                let m2 = sc.physics.field_mass.powi(2);
                let omega = (k * k + m2).sqrt();
                for idx in 0..n {
                    let x = grid.node_coord(0, grid.multi_index(idx)[0]);
                    phi[idx] += amplitude * (k * x).cos();
                    if *traveling {
                        dot[idx] += amplitude * omega * (k * x).sin();
                    }
                }
            }
            FieldInit::Gaussian { amplitude, center, width, velocity } => {
                if center.len() != d {
                    return Err(crate::Error::config("initial.field.center", format!("needs {d} entries")));
                }
                gaussian(&mut phi, &mut dot, *amplitude, center, *width, *velocity);
            }
            FieldInit::Yukawa => {
                let s = static_field(sc, sys)?;
                for (p, v) in phi.iter_mut().zip(&s) {
                    *p += v;
                }
            }
            FieldInit::RandomPulses { count, amplitude, width } => {
                for _ in 0..*count {
                    let mut c = vec![0.0; d];
                    for (a, ca) in c.iter_mut().enumerate() {
                        *ca = grid.lo(a) + rng.gen::<f64>() * grid.extents[a];
                    }
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    gaussian(&mut phi, &mut dot, sign * amplitude, &c, *width, 0.0);
                }
            }
        }
    }
    Ok((phi, dot))
}

fn probe_values(sys: &CoupledSystem, sc: &Scenario, phi: &[f64]) -> Result<Vec<f64>> {
    sc.outputs
        .probes
        .iter()
        .map(|p| {
            let st = sys.grid().stencil(&sys.kernel, p)?;
            Ok(st.sample(phi).0)
        })
        .collect()
}

/// Runs a scenario. Solver failures stop the run and are recorded in
/// `failure`; everything up to that point is kept.
pub fn run(sc: &Scenario, opts: RunOptions) -> Result<RunRecord> {
    sc.validate()?;
    let sys = sc.system()?;
    let (phi, dot) = initial_field(sc, &sys)?;
    let particle = sc.particle_xv()?;
    let mut state = sys.init(phi, &dot, particle, 0.0)?;
    let steps = sc.steps();
    let dt = sc.dt;

    let mut rec = RunRecord {
        scenario: sc.clone(),
        times: Vec::with_capacity(steps + 1),
        trajectory: Vec::new(),
        diagnostics: Vec::new(),
        snapshots: Vec::new(),
        probes: vec![Vec::with_capacity(steps + 1); sc.outputs.probes.len()],
        momentum: Vec::new(),
        fields: Vec::new(),
        worldline: None,
        newton_iterations: 0,
        failure: None,
    };
    let mut xs: Vec<[f64; 3]> = Vec::new();
    let mut sems: VecDeque<SemGrid> = VecDeque::with_capacity(3);
    let v0 = particle.map(|(_, v)| v).unwrap_or([0.0; 3]);
    let mut prev_x: Option<[f64; 3]> = None;
    let mut energies: Vec<f64> = Vec::new();
    let mut divs: Vec<(f64, f64)> = Vec::new();

    // one look-ahead step finalizes the last level
    for level in 0..=steps {
        let cur: CoupledState = state.clone();
        let report: StepReport = match sys.step(&mut state) {
            Ok(r) => r,
            Err(e) => {
                rec.failure = Some(e.to_string());
                break;
            }
        };
        rec.newton_iterations += report.newton_iterations;
        let t = cur.field.t;
        rec.times.push(t);
        for (series, v) in rec.probes.iter_mut().zip(probe_values(&sys, sc, &cur.field.phi)?) {
            series.push(v);
        }
        let mut point = None;
        if let (Some(b), Some(nb)) = (&cur.body, &state.body) {
            let mut v = [0.0; 3];
            match prev_x {
                None => v = v0,
                Some(px) => {
                    for i in 0..sys.grid().d {
                        v[i] = (nb.x[i] - px[i]) / (2.0 * dt);
                    }
                }
            }
            let st = sys.grid().stencil(&sys.kernel, &b.x)?;
            let phi_at = st.sample(&cur.field.phi).0;
            rec.trajectory.push(TrajectoryRow {
                step: level,
                t,
                x: b.x,
                v,
                node_norm: report.node_norm,
                phi: phi_at,
            });
            xs.push(b.x);
            prev_x = Some(b.x);
            point = Some(WorldlinePoint { x: b.x, v, norm: report.node_norm });
        }
        if sc.outputs.snapshot_every > 0 && level % sc.outputs.snapshot_every == 0 {
            rec.snapshots.push(Snapshot {
                step: level,
                state: cur.field.clone(),
                pi_plus: state.field.pi.clone(),
            });
        }
        if opts.sem {
            let sem = level_sem(&sys, sc, &cur.field, &state.field.pi, point.as_ref())?;
            rec.momentum.push(total_momentum(sys.grid(), &sem));
            energies.push(sem.canonical.iter().map(|m| m[0][0]).sum::<f64>() * sys.grid().cell_volume());
            if sems.len() == 3 {
                sems.pop_front();
            }
            sems.push_back(sem);
            if sems.len() == 3 {
                let snaps: Vec<SemGrid> = sems.iter().cloned().collect();
                let div = sem_divergence(sys.grid(), &snaps)?;
                divs.push((div.l2, div.linf));
            }
        }
        if opts.keep_history {
            rec.fields.push(cur.field);
        }
    }
    if opts.sem {
        let levels = rec.momentum.len();
        for level in 0..levels {
            if level % sc.outputs.cadence != 0 && level + 1 != levels {
                continue;
            }
            // divergence is centered, so it exists for interior levels only
            let (div_l2, div_linf) = if level >= 1 && level <= divs.len() {
                divs[level - 1]
            } else {
                (f64::NAN, f64::NAN)
            };
            rec.diagnostics.push(Diagnostic {
                step: level,
                t: rec.times[level],
                momentum: rec.momentum[level],
                field_energy: energies[level],
                div_l2,
                div_linf,
            });
        }
    }
    if let Some(c) = sys.charge {
        if !xs.is_empty() {
            rec.worldline = Some(Worldline {
                d: sys.grid().d,
                t: rec.times[..xs.len()].to_vec(),
                x: xs,
                m: c.m,
                eps: c.eps,
            });
        }
    }
    Ok(rec)
}

/// SEM tensor at one level from the field, its forward half-step derivative
/// and (when present) the particle's node data.
pub fn level_sem(
    sys: &CoupledSystem,
    sc: &Scenario,
    field: &FieldState,
    pi_next: &[f64],
    point: Option<&WorldlinePoint>,
) -> Result<SemGrid> {
    let grid = sys.grid();
    let canonical = kg_sem(grid, &sys.metric, sc.physics.field_mass, field, pi_next);
    let (theta, m, eps) = match (point, sys.charge) {
        (Some(at), Some(c)) => (minkowski_theta(grid, &sys.kernel, at)?, c.m, c.eps),
        _ => (vec![ZERO_MAT; grid.len()], 0.0, 0.0),
    };
    Ok(assemble(grid, field.t, canonical, theta, m, eps, &field.phi))
}

/// One finite-difference variation of the discrete action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualRow {
    pub level: usize,
    /// `None` for a field node, `Some(axis)` for the particle.
    pub particle_axis: Option<usize>,
    pub index: usize,
    pub derivative: f64,
    pub scale: f64,
    pub relative: f64,
}

/// Variations at every interior level: every `field_stride`-th field node
/// and each particle coordinate. Needs a run recorded with `keep_history`.
pub fn variational_audit(rec: &RunRecord, field_stride: usize) -> Result<Vec<ResidualRow>> {
    let sc = &rec.scenario;
    let setup = ActionSetup {
        grid: sc.grid.clone(),
        metric: sc.metric()?,
        eta: sc.eta()?,
        kernel: sc.kernel,
        mass: sc.physics.field_mass,
        suspension: sc.suspension(),
    };
    let fields = &rec.fields;
    if fields.len() < 3 {
        return Err(crate::Error::Window("variational audit needs at least three levels".into()));
    }
    let phi_scale = fields
        .iter()
        .flat_map(|f| f.phi.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-3);
    let h = sc.grid.min_spacing();
    // Where the field is locally negligible the per-term differences are pure
    // roundoff; field rows are normalized by at least the term derivative
    // produced by a field of amplitude `phi_scale`.
    let dt = sc.dt;
    let stiffness = 1.0 / (dt * dt)
        + (0..sc.grid.d).map(|a| sc.grid.spacing(a).powi(-2)).sum::<f64>()
        + sc.physics.field_mass.powi(2);
    let nodes: Vec<f64> = fields.iter().map(|f| f.t).collect();
    let field_floor = suspension_quadrature(&setup.suspension, &nodes)
        * sc.grid.cell_volume()
        * dt
        * stiffness
        * phi_scale;
    let wl = rec.worldline.as_ref();
    let interior: Vec<usize> = if sc.grid.is_periodic() {
        (0..sc.grid.len()).collect()
    } else {
        (0..sc.grid.len())
            .filter(|&i| {
                let m = sc.grid.multi_index(i);
                (0..sc.grid.d).all(|a| m[a] > 0 && m[a] + 1 < sc.grid.n[a])
            })
            .collect()
    };
    let levels = 1..fields.len() - 1;
    let field_vars: Vec<Variation> = levels
        .clone()
        .flat_map(|level| {
            interior
                .iter()
                .step_by(field_stride.max(1))
                .map(move |&node| Variation::FieldNode { level, node })
        })
        .collect();
    let particle_vars: Vec<Variation> = match wl {
        Some(w) => levels
            .flat_map(|level| (0..w.d).map(move |axis| Variation::ParticleNode { level, axis }))
            .collect(),
        None => Vec::new(),
    };
    let mut rows = Vec::with_capacity(field_vars.len() + particle_vars.len());
    for (vars, scale, floor) in [(&field_vars, phi_scale, field_floor), (&particle_vars, h, 0.0)] {
        let res = variational_residuals(&setup, fields, wl, vars, scale)?;
        rows.extend(vars.iter().zip(res).map(|(v, mut r)| {
            r.scale = r.scale.max(floor);
            let (level, particle_axis, index) = match *v {
                Variation::FieldNode { level, node } => (level, None, node),
                Variation::ParticleNode { level, axis } => (level, Some(axis), axis),
            };
            ResidualRow {
                level,
                particle_axis,
                index,
                derivative: r.derivative,
                scale: r.scale,
                relative: r.relative(),
            }
        }));
    }
    rows.sort_by_key(|r| (r.level, r.particle_axis.is_some(), r.index));
    Ok(rows)
}
