//! Stress-energy-momentum tensor densities: the Klein-Gordon part, the
//! worldline (Minkowski) part, their assembly, and conservation audits.
//!
//! All stored tensors are contravariant densities of weight one. The
//! Klein-Gordon part is signed so that its `00` component is the (positive)
//! field energy density:
//!
//! `t^{mu nu} = 1/2 ((2 G^{mu a} G^{nu b} - G^{mu nu} G^{ab}) phi_a phi_b + G^{mu nu} M^2 phi^2) sqrt|G|`.

use crate::error::{Error, Result};
use crate::geometry::{CovarianceMap, DeltaKernel, LambdaMeasure, Mat, Metric, ZERO_MAT};
use crate::kg_field::{FieldState, GridSpec};
use crate::lagrangian::{action_parts, ActionSetup, Worldline};
use crate::util::pairwise_sum;

/// Tensor fields on one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct SemGrid {
    pub d: usize,
    pub t: f64,
    pub total: Vec<Mat>,
    pub canonical: Vec<Mat>,
    pub theta: Vec<Mat>,
}

/// Auxiliary components along the suspension direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemAux {
    pub t44: f64,
    pub t4nu: [f64; 5],
    pub tmu4: [f64; 5],
}

/// Discrete products `phi_a phi_b` at node `idx`: `pi- pi+` in time, the
/// average of one-sided squares along each axis, centered products otherwise.
fn gradient_products(grid: &GridSpec, cur: &FieldState, pi_next: &[f64], idx: usize, topo: &crate::kg_field::Topology) -> Mat {
    let d = grid.d;
    let phi = &cur.phi;
    let mut fwd = [0.0; 3];
    let mut bwd = [0.0; 3];
    let mut cen = [0.0; 3];
    for a in 0..d {
        let h = grid.spacing(a);
        let p = topo.plus(a, idx);
        let m = topo.minus(a, idx);
        fwd[a] = p.map_or(0.0, |p| (phi[p] - phi[idx]) / h);
        bwd[a] = m.map_or(0.0, |m| (phi[idx] - phi[m]) / h);
        cen[a] = match (p, m) {
            (Some(_), Some(_)) => 0.5 * (fwd[a] + bwd[a]),
            (Some(_), None) => fwd[a],
            (None, Some(_)) => bwd[a],
            (None, None) => 0.0,
        };
    }
    let (pm, pp) = (cur.pi[idx], pi_next[idx]);
    let mut q = ZERO_MAT;
    q[0][0] = pm * pp;
    for a in 0..d {
        let c = 0.5 * (pm + pp) * cen[a];
        q[0][a + 1] = c;
        q[a + 1][0] = c;
        for b in 0..d {
            q[a + 1][b + 1] = if a == b {
                0.5 * (fwd[a] * fwd[a] + bwd[a] * bwd[a])
            } else {
                cen[a] * cen[b]
            };
        }
    }
    q
}

/// Canonical Klein-Gordon tensor density at every node of `cur`, with
/// `pi_next` the forward half-step time derivative.
pub fn kg_sem(grid: &GridSpec, metric: &Metric, mass: f64, cur: &FieldState, pi_next: &[f64]) -> Vec<Mat> {
    let n = grid.d + 1;
    let topo = grid.topology();
    let m2 = mass * mass;
    (0..grid.len())
        .map(|idx| {
            let x = grid.node_event(idx, cur.t);
            let gi = metric.inverse(&x);
            let vol = metric.vol_density(&x);
            let q = gradient_products(grid, cur, pi_next, idx, &topo);
            // G q G and tr(G q)
            let mut gq = ZERO_MAT;
            for mu in 0..n {
                for b in 0..n {
                    gq[mu][b] = (0..n).map(|a| gi[mu][a] * q[a][b]).sum();
                }
            }
            let tr: f64 = (0..n).map(|a| (0..n).map(|b| gi[a][b] * q[a][b]).sum::<f64>()).sum();
            let phi = cur.phi[idx];
            let mut t = ZERO_MAT;
            for mu in 0..n {
                for nu in mu..n {
                    let gqg: f64 = (0..n).map(|b| gq[mu][b] * gi[nu][b]).sum();
                    let v = 0.5 * (2.0 * gqg - gi[mu][nu] * tr + gi[mu][nu] * m2 * phi * phi) * vol;
                    t[mu][nu] = v;
                    t[nu][mu] = v;
                }
            }
            t
        })
        .collect()
}

/// Particle data at a field time level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldlinePoint {
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub norm: f64,
}

/// Position, coordinate velocity and velocity norm of the worldline at `t`.
pub fn worldline_at(wl: &Worldline, metric: &Metric, eta: &CovarianceMap, t: f64) -> Result<WorldlinePoint> {
    let n = wl.len();
    if n < 2 {
        return Err(Error::Window("worldline needs at least two nodes".into()));
    }
    let dt = wl.t[1] - wl.t[0];
    let tol = 1e-9 * dt.abs().max(t.abs());
    if t < wl.t[0] - tol || t > wl.t[n - 1] + tol {
        return Err(Error::Window(format!(
            "t = {t} outside the worldline window [{}, {}]",
            wl.t[0],
            wl.t[n - 1]
        )));
    }
    let slabs: Vec<f64> = (0..n - 1)
        .map(|k| wl.slab(metric, eta, k).map(|s| s.s))
        .collect::<Result<_>>()?;
    if let Some(k) = (0..n).find(|&k| (wl.t[k] - t).abs() <= tol) {
        return Ok(WorldlinePoint {
            x: wl.x[k],
            v: wl.node_velocity(k),
            norm: wl.node_norm(&slabs, k),
        });
    }
    let k = (0..n - 1).find(|&k| wl.t[k] <= t && t <= wl.t[k + 1]).expect("bracketed");
    let f = (t - wl.t[k]) / (wl.t[k + 1] - wl.t[k]);
    let mut x = [0.0; 3];
    let mut v = [0.0; 3];
    for i in 0..wl.d {
        x[i] = wl.x[k][i] + f * (wl.x[k + 1][i] - wl.x[k][i]);
        v[i] = (wl.x[k + 1][i] - wl.x[k][i]) / (wl.t[k + 1] - wl.t[k]);
    }
    Ok(WorldlinePoint { x, v, norm: slabs[k] })
}

/// Minkowski tensor density `u^mu u^nu / (|zdot| u^0) W(x - X)` with
/// `u = (1, v)` the coordinate velocity, collapsed onto the time level.
/// The covariance-field factors cancel against the fiber velocity, so only
/// the norm carries the map.
pub fn minkowski_theta(grid: &GridSpec, kernel: &DeltaKernel, at: &WorldlinePoint) -> Result<Vec<Mat>> {
    let n = grid.d + 1;
    let mut u = [0.0; 4];
    u[0] = 1.0;
    u[1..n].copy_from_slice(&at.v[..grid.d]);
    let mut out = vec![ZERO_MAT; grid.len()];
    let st = grid.stencil(kernel, &at.x).map_err(|e| match e {
        Error::Boundary(m) => Error::Escape(m),
        other => other,
    })?;
    let vol = grid.cell_volume();
    st.for_each(|idx, w, _| {
        let c = w / (vol * at.norm * u[0]);
        for mu in 0..n {
            for nu in 0..n {
                out[idx][mu][nu] += c * u[mu] * u[nu];
            }
        }
    });
    Ok(out)
}

/// Everything `total_sem` needs about the particle.
pub struct ParticleSem<'a> {
    pub worldline: &'a Worldline,
    pub kernel: &'a DeltaKernel,
    pub eta: &'a CovarianceMap,
}

/// `T = t + (m + eps phi) Theta`, with `phi` the nodal field value.
pub fn total_sem(
    grid: &GridSpec,
    metric: &Metric,
    mass: f64,
    cur: &FieldState,
    pi_next: &[f64],
    particle: Option<&ParticleSem>,
) -> Result<SemGrid> {
    let canonical = kg_sem(grid, metric, mass, cur, pi_next);
    let (theta, m, eps) = match particle {
        Some(p) => {
            let at = worldline_at(p.worldline, metric, p.eta, cur.t).map_err(|e| match e {
                Error::Window(m) => Error::Alignment(m),
                other => other,
            })?;
            (
                minkowski_theta(grid, p.kernel, &at)?,
                p.worldline.m,
                p.worldline.eps,
            )
        }
        None => (vec![ZERO_MAT; grid.len()], 0.0, 0.0),
    };
    Ok(assemble(grid, cur.t, canonical, theta, m, eps, &cur.phi))
}

/// `T = t + (m + eps phi) Theta` cell by cell.
pub fn assemble(
    grid: &GridSpec,
    t: f64,
    canonical: Vec<Mat>,
    theta: Vec<Mat>,
    m: f64,
    eps: f64,
    phi: &[f64],
) -> SemGrid {
    let n = grid.d + 1;
    let mut total = canonical.clone();
    for (idx, tt) in total.iter_mut().enumerate() {
        let f = m + eps * phi[idx];
        for mu in 0..n {
            for nu in mu..n {
                let v = canonical[idx][mu][nu] + f * theta[idx][mu][nu];
                tt[mu][nu] = v;
                tt[nu][mu] = v;
            }
        }
    }
    SemGrid {
        d: grid.d,
        t,
        total,
        canonical,
        theta,
    }
}

/// Pointwise divergence and its norms relative to the L2 norm of `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub t: f64,
    pub per_cell: Vec<[f64; 4]>,
    pub l2: f64,
    pub linf: f64,
}

/// `d_nu T^{mu nu}` at the middle of three consecutive snapshots, with
/// centered differences in time and space. Non-periodic grids skip the
/// outermost layer.
pub fn sem_divergence(grid: &GridSpec, snaps: &[SemGrid]) -> Result<Divergence> {
    if snaps.len() < 3 {
        return Err(Error::Window(format!("divergence needs 3 snapshots, got {}", snaps.len())));
    }
    let (a, b, c) = (&snaps[0], &snaps[1], &snaps[2]);
    let dt = 0.5 * (c.t - a.t);
    if !(dt > 0.0) || ((b.t - a.t) - (c.t - b.t)).abs() > 1e-9 * dt {
        return Err(Error::Alignment("snapshots must be equally spaced in time".into()));
    }
    let n = grid.d + 1;
    let topo = grid.topology();
    let mut per_cell = vec![[0.0; 4]; grid.len()];
    let mut sq = Vec::with_capacity(grid.len());
    let mut tsq = Vec::with_capacity(grid.len());
    let mut linf: f64 = 0.0;
    for idx in 0..grid.len() {
        let mut frob = 0.0;
        for mu in 0..n {
            for nu in 0..n {
                frob += b.total[idx][mu][nu].powi(2);
            }
        }
        tsq.push(frob);
        let nbrs: Vec<(usize, usize)> = (0..grid.d)
            .filter_map(|ax| Some((topo.plus(ax, idx)?, topo.minus(ax, idx)?)))
            .collect();
        if nbrs.len() < grid.d {
            continue;
        }
        let mut dv = [0.0; 4];
        for mu in 0..n {
            let mut s = (c.total[idx][mu][0] - a.total[idx][mu][0]) / (2.0 * dt);
            for (ax, &(p, m)) in nbrs.iter().enumerate() {
                s += (b.total[p][mu][ax + 1] - b.total[m][mu][ax + 1]) / (2.0 * grid.spacing(ax));
            }
            dv[mu] = s;
        }
        let mag: f64 = dv.iter().map(|v| v * v).sum();
        linf = linf.max(mag.sqrt());
        sq.push(mag);
        per_cell[idx] = dv;
    }
    let norm_t = (pairwise_sum(&tsq) * grid.cell_volume()).sqrt();
    let l2 = (pairwise_sum(&sq) * grid.cell_volume()).sqrt();
    let (l2, linf) = if norm_t > 0.0 { (l2 / norm_t, linf / norm_t) } else { (l2, linf) };
    Ok(Divergence {
        t: b.t,
        per_cell,
        l2,
        linf,
    })
}

/// `T^4_4` as the windowed Klein-Gordon action quadrature; the mixed
/// components vanish identically.
pub fn sem_aux(
    grid: &GridSpec,
    metric: &Metric,
    mass: f64,
    fields: &[FieldState],
    k: &LambdaMeasure,
) -> Result<SemAux> {
    let setup = ActionSetup {
        grid: grid.clone(),
        metric: metric.clone(),
        eta: CovarianceMap::identity(grid.d),
        kernel: DeltaKernel::default(),
        mass,
        suspension: *k,
    };
    let t44 = action_parts(&setup, fields, None)?.kg();
    Ok(SemAux {
        t44,
        t4nu: [0.0; 5],
        tmu4: [0.0; 5],
    })
}

/// Total momentum history and its drift.
#[derive(Clone, Debug, PartialEq)]
pub struct ConservationReport {
    pub times: Vec<f64>,
    pub momentum: Vec<[f64; 4]>,
    /// `max |P^mu(t) - P^mu(0)| / |P^0(0)|` over the run.
    pub max_drift: f64,
}

/// `P^mu = sum_cells T^{mu 0} dV`.
pub fn total_momentum(grid: &GridSpec, sem: &SemGrid) -> [f64; 4] {
    let mut p = [0.0; 4];
    let vol = grid.cell_volume();
    for (mu, pm) in p.iter_mut().enumerate().take(grid.d + 1) {
        let col: Vec<f64> = sem.total.iter().map(|t| t[mu][0]).collect();
        *pm = pairwise_sum(&col) * vol;
    }
    p
}

pub fn conservation_audit(grid: &GridSpec, sems: &[SemGrid]) -> Result<ConservationReport> {
    if !grid.is_periodic() {
        return Err(Error::Audit(
            "conservation audit needs a periodic grid: boundary flux is not accounted".into(),
        ));
    }
    let momentum: Vec<[f64; 4]> = sems.iter().map(|s| total_momentum(grid, s)).collect();
    drift_report(sems.iter().map(|s| s.t).collect(), momentum)
}

/// Drift of a precomputed momentum series.
pub fn drift_report(times: Vec<f64>, momentum: Vec<[f64; 4]>) -> Result<ConservationReport> {
    let first = *momentum
        .first()
        .ok_or_else(|| Error::Window("empty momentum history".into()))?;
    let e0 = first[0].abs();
    let mut worst: f64 = 0.0;
    for p in &momentum {
        for mu in 0..4 {
            worst = worst.max((p[mu] - first[mu]).abs());
        }
    }
    let max_drift = if e0 > 0.0 { worst / e0 } else { worst };
    Ok(ConservationReport {
        times,
        momentum,
        max_drift,
    })
}
