//! The concatenated Lagrangian density over spacetime x lambda, its discrete
//! quadrature, and the finite-difference variational oracle.
//!
//! Discretization (coordinate-time gauge, particle nodes on field levels):
//!
//! * Klein-Gordon kinetic term on half levels, gradient term on cell edges and
//!   mass term on nodes, each sampled through [`eval_kg_density`];
//! * the particle term is trapezoidal in lambda with node norm
//!   `s_k = (s_{k-1/2} + s_{k+1/2}) / 2` built from slab norms, and the
//!   spacetime delta collapsed onto the matching field level;
//! * the suspension density `sqrt(K)` is integrated with the trapezoid rule on
//!   the same lambda nodes.
//!
//! The leapfrog field update and the coupled particle update are exactly the
//! stationarity conditions of this sum at interior nodes.

use crate::error::{Error, Result};
use crate::geometry::{
    delta_composed, mat_inverse, pullback_metric, quad_form, CovarianceMap, DeltaKernel, Event,
    LambdaMeasure, Metric, MAX_DIM,
};
use crate::kg_field::{FieldState, GridSpec};
use crate::particle::{slab_norm, ParticleState, SlabNorm};
use crate::util::pairwise_sum;

/// `1/2 (G^{mu nu} phi_mu phi_nu - M^2 phi^2) sqrt|G| sqrt K`.
pub fn eval_kg_density(
    phi: f64,
    grad_phi: &Event,
    x: &Event,
    sqrt_k: f64,
    metric: &Metric,
    mass: f64,
) -> f64 {
    let n = metric.dim();
    let (ginv, vol) = if metric.is_minkowski() {
        let mut g = crate::geometry::identity_mat(n);
        for (i, row) in g.iter_mut().enumerate().take(n).skip(1) {
            row[i] = -1.0;
        }
        (g, 1.0)
    } else {
        (metric.inverse(x), metric.vol_density(x))
    };
    0.5 * (quad_form(n, &ginv, grad_phi, grad_phi) - mass * mass * phi * phi) * vol * sqrt_k
}

/// `-(m + eps phi) |zdot| delta(eta(x) - z) det eta_*` with the regularized
/// composed delta. `spacing` is the kernel cell size per spacetime axis.
pub fn eval_particle_density(
    x: &Event,
    p: &ParticleState,
    phi_at: f64,
    metric: &Metric,
    eta: &CovarianceMap,
    kernel: &DeltaKernel,
    spacing: &[f64],
) -> Result<f64> {
    let g = pullback_metric(metric, eta, &p.z)?;
    let q = quad_form(p.dim(), &g, &p.zdot, &p.zdot);
    if !(q > 0.0) {
        return Err(Error::Gauge(format!("zdot not timelike: g(zdot, zdot) = {q}")));
    }
    let delta = delta_composed(kernel, spacing, eta, x, &p.z);
    Ok(-(p.m + p.eps * phi_at) * q.sqrt() * delta)
}

/// Physical worldline sampled on the field time levels.
#[derive(Clone, Debug, PartialEq)]
pub struct Worldline {
    pub d: usize,
    pub t: Vec<f64>,
    pub x: Vec<[f64; 3]>,
    pub m: f64,
    pub eps: f64,
}

impl Worldline {
    pub fn from_states(states: &[ParticleState], eta: &CovarianceMap) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::Window("empty particle history".into()))?;
        let mut t = Vec::with_capacity(states.len());
        let mut x = Vec::with_capacity(states.len());
        for s in states {
            let e = s.physical(eta);
            t.push(e[0]);
            let mut p = [0.0; 3];
            p[..first.d].copy_from_slice(&e[1..=first.d]);
            x.push(p);
        }
        Ok(Worldline {
            d: first.d,
            t,
            x,
            m: first.m,
            eps: first.eps,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn slab(&self, metric: &Metric, eta: &CovarianceMap, k: usize) -> Result<SlabNorm> {
        slab_norm(
            self.d,
            metric,
            eta,
            self.t[k],
            &self.x[k],
            self.t[k + 1],
            &self.x[k + 1],
        )
    }

    /// Node norms `s_k`: average of the adjacent slab norms (one-sided at the
    /// window ends).
    pub fn node_norm(&self, slabs: &[f64], k: usize) -> f64 {
        let last = self.len() - 1;
        if k == 0 {
            slabs[0]
        } else if k == last {
            slabs[last - 1]
        } else {
            0.5 * (slabs[k - 1] + slabs[k])
        }
    }

    /// Coordinate velocity at node `k` from the adjacent slabs.
    pub fn node_velocity(&self, k: usize) -> [f64; 3] {
        let last = self.len() - 1;
        let (a, b) = if k == 0 {
            (0, 1)
        } else if k == last {
            (last - 1, last)
        } else {
            (k - 1, k + 1)
        };
        let dt = self.t[b] - self.t[a];
        let mut v = [0.0; 3];
        for i in 0..self.d {
            v[i] = (self.x[b][i] - self.x[a][i]) / dt;
        }
        v
    }
}

/// Everything the discrete action needs besides the histories.
#[derive(Clone, Debug)]
pub struct ActionSetup {
    pub grid: GridSpec,
    pub metric: Metric,
    pub eta: CovarianceMap,
    pub kernel: DeltaKernel,
    pub mass: f64,
    pub suspension: LambdaMeasure,
}

/// Trapezoid weights on `levels` uniform nodes of spacing `dt`.
pub fn trapezoid_weights(levels: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![dt; levels];
    if levels > 0 {
        w[0] = 0.5 * dt;
        w[levels - 1] = 0.5 * dt;
    }
    w
}

/// Sub-intervals per lambda slab in the suspension rule.
const LAMBDA_SUBDIVISION: usize = 16;

/// Quadrature points and weights on the lambda axis: three-point
/// Gauss-Legendre on `LAMBDA_SUBDIVISION` equal pieces of every slab
/// between consecutive nodes. Resolves the kinks of compactly supported
/// densities far below the time-level spacing.
pub fn suspension_rule(nodes: &[f64]) -> Vec<(f64, f64)> {
    let r = (0.6f64).sqrt() * 0.5;
    let gl = [(0.5 - r, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + r, 5.0 / 18.0)];
    let mut out = Vec::with_capacity(3 * LAMBDA_SUBDIVISION * nodes.len());
    for w in nodes.windows(2) {
        let h = (w[1] - w[0]) / LAMBDA_SUBDIVISION as f64;
        for j in 0..LAMBDA_SUBDIVISION {
            let a = w[0] + j as f64 * h;
            out.extend(gl.iter().map(|&(x, wt)| (a + x * h, wt * h)));
        }
    }
    out
}

/// Quadrature of `sqrt(K)` over the span of the lambda nodes.
pub fn suspension_quadrature(measure: &LambdaMeasure, nodes: &[f64]) -> f64 {
    let acc: Vec<f64> = suspension_rule(nodes)
        .iter()
        .map(|&(l, w)| w * measure.k_density(l))
        .collect();
    pairwise_sum(&acc)
}

/// `|S(D1) - S(D2)|` for a lambda-independent integrand with action value
/// `integrand` per unit suspension weight.
pub fn suspension_equivalence(
    integrand: f64,
    nodes: &[f64],
    d1: &LambdaMeasure,
    d2: &LambdaMeasure,
) -> Result<f64> {
    d1.validate()?;
    d2.validate()?;
    let q1 = suspension_quadrature(d1, nodes);
    let q2 = suspension_quadrature(d2, nodes);
    Ok((integrand * q1 - integrand * q2).abs())
}

fn check_alignment(fields: &[FieldState], wl: Option<&Worldline>) -> Result<f64> {
    if fields.len() < 2 {
        return Err(Error::Window("field history needs at least two levels".into()));
    }
    let dt = fields[1].t - fields[0].t;
    if !(dt > 0.0) {
        return Err(Error::Alignment("field levels must advance in time".into()));
    }
    for (k, f) in fields.iter().enumerate() {
        let want = fields[0].t + k as f64 * dt;
        if (f.t - want).abs() > 1e-9 * dt.max(f.t.abs()) {
            return Err(Error::Alignment(format!("field level {k} at t = {} is off the uniform clock", f.t)));
        }
    }
    if let Some(w) = wl {
        if w.len() != fields.len() {
            return Err(Error::Alignment(format!(
                "{} particle nodes vs {} field levels",
                w.len(),
                fields.len()
            )));
        }
        for (k, (a, b)) in w.t.iter().zip(fields).enumerate() {
            if (a - b.t).abs() > 1e-9 * dt.max(a.abs()) {
                return Err(Error::Alignment(format!(
                    "particle node {k} at t = {a} vs field level at t = {}",
                    b.t
                )));
            }
        }
    }
    Ok(dt)
}

/// Separately accumulated action contributions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActionParts {
    pub kinetic: f64,
    pub gradient: f64,
    pub mass: f64,
    pub interaction: f64,
    pub free_particle: f64,
}

impl ActionParts {
    pub fn kg(&self) -> f64 {
        self.kinetic + self.gradient + self.mass
    }

    pub fn total(&self) -> f64 {
        self.kg() + self.interaction + self.free_particle
    }

    fn max_abs(&self) -> f64 {
        [
            self.kinetic,
            self.gradient,
            self.mass,
            self.interaction,
            self.free_particle,
        ]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn sub(&self, o: &ActionParts) -> ActionParts {
        ActionParts {
            kinetic: self.kinetic - o.kinetic,
            gradient: self.gradient - o.gradient,
            mass: self.mass - o.mass,
            interaction: self.interaction - o.interaction,
            free_particle: self.free_particle - o.free_particle,
        }
    }
}

/// Which terms of the window to evaluate.
struct Window<'a> {
    slabs: std::ops::Range<usize>,
    levels: std::ops::RangeInclusive<usize>,
    particle_levels: std::ops::RangeInclusive<usize>,
    cells: Option<&'a [usize]>,
    /// `(level, node, delta)` added to the stored field on the fly.
    bump: Option<(usize, usize, f64)>,
}

impl Window<'_> {
    fn phi(&self, fields: &[FieldState], n: usize, i: usize) -> f64 {
        match self.bump {
            Some((l, j, d)) if l == n && j == i => fields[n].phi[i] + d,
            _ => fields[n].phi[i],
        }
    }
}

fn trapezoid_weight(k: usize, levels: usize, dt: f64) -> f64 {
    if k == 0 || k + 1 == levels {
        0.5 * dt
    } else {
        dt
    }
}

fn kg_parts(setup: &ActionSetup, fields: &[FieldState], dt: f64, win: &Window) -> ActionParts {
    kg_terms(setup, fields, dt, win).0
}

/// Grouped sums plus the individual terms in a fixed order.
fn kg_terms(setup: &ActionSetup, fields: &[FieldState], dt: f64, win: &Window) -> (ActionParts, Vec<f64>) {
    let grid = &setup.grid;
    let vol = grid.cell_volume();
    let topo = grid.topology();
    let all: Vec<usize>;
    let cells: &[usize] = match win.cells {
        Some(c) => c,
        None => {
            all = (0..grid.len()).collect();
            &all
        }
    };
    let mut kin = Vec::new();
    for n in win.slabs.clone() {
        let th = fields[n].t + 0.5 * dt;
        for &i in cells {
            let pi = (win.phi(fields, n + 1, i) - win.phi(fields, n, i)) / dt;
            let mut g = [0.0; MAX_DIM];
            g[0] = pi;
            let x = grid.node_event(i, th);
            kin.push(vol * dt * eval_kg_density(0.0, &g, &x, 1.0, &setup.metric, setup.mass));
        }
    }
    let mut grad = Vec::new();
    let mut mass = Vec::new();
    for n in win.levels.clone() {
        let w = trapezoid_weight(n, fields.len(), dt);
        for &i in cells {
            let x = grid.node_event(i, fields[n].t);
            let phi_i = win.phi(fields, n, i);
            mass.push(vol * w * eval_kg_density(phi_i, &[0.0; MAX_DIM], &x, 1.0, &setup.metric, setup.mass));
            for a in 0..grid.d {
                if let Some(p) = topo.plus(a, i) {
                    let h = grid.spacing(a);
                    let mut g = [0.0; MAX_DIM];
                    g[a + 1] = (win.phi(fields, n, p) - phi_i) / h;
                    let mut xe = x;
                    xe[a + 1] += 0.5 * h;
                    grad.push(vol * w * eval_kg_density(0.0, &g, &xe, 1.0, &setup.metric, setup.mass));
                }
            }
        }
    }
    let parts = ActionParts {
        kinetic: pairwise_sum(&kin),
        gradient: pairwise_sum(&grad),
        mass: pairwise_sum(&mass),
        ..Default::default()
    };
    kin.extend(grad);
    kin.extend(mass);
    (parts, kin)
}

fn particle_parts(
    setup: &ActionSetup,
    fields: &[FieldState],
    wl: &Worldline,
    dt: f64,
    levels: std::ops::RangeInclusive<usize>,
) -> Result<ActionParts> {
    Ok(particle_terms(setup, fields, wl, dt, levels, None)?.0)
}

fn particle_terms(
    setup: &ActionSetup,
    fields: &[FieldState],
    wl: &Worldline,
    dt: f64,
    levels: std::ops::RangeInclusive<usize>,
    bump: Option<(usize, usize, f64)>,
) -> Result<(ActionParts, Vec<f64>)> {
    let last = wl.len() - 1;
    let lo = levels.start().saturating_sub(1);
    let hi = (*levels.end()).min(last - 1);
    let mut slab = vec![0.0; wl.len() - 1];
    for k in lo..=hi {
        slab[k] = wl.slab(&setup.metric, &setup.eta, k)?.s;
    }
    let mut inter = Vec::new();
    let mut free = Vec::new();
    for k in levels {
        let s = wl.node_norm(&slab, k);
        let st = setup.grid.stencil(&setup.kernel, &wl.x[k])?;
        let mut phi = 0.0;
        st.for_each(|idx, w, _| {
            phi += w * match bump {
                Some((l, j, d)) if l == k && j == idx => fields[k].phi[idx] + d,
                _ => fields[k].phi[idx],
            };
        });
        let wk = trapezoid_weight(k, wl.len(), dt);
        free.push(-wk * s * wl.m);
        inter.push(-wk * s * wl.eps * phi);
    }
    let parts = ActionParts {
        interaction: pairwise_sum(&inter),
        free_particle: pairwise_sum(&free),
        ..Default::default()
    };
    free.extend(inter);
    Ok((parts, free))
}

/// Discrete action split by term, with the Klein-Gordon part carrying the
/// lambda-quadrature of the suspension density.
pub fn action_parts(
    setup: &ActionSetup,
    fields: &[FieldState],
    particle: Option<&Worldline>,
) -> Result<ActionParts> {
    let dt = check_alignment(fields, particle)?;
    let last = fields.len() - 1;
    let win = Window {
        slabs: 0..last,
        levels: 0..=last,
        particle_levels: 0..=last,
        cells: None,
        bump: None,
    };
    let mut parts = kg_parts(setup, fields, dt, &win);
    let nodes: Vec<f64> = fields.iter().map(|f| f.t).collect();
    let q = suspension_quadrature(&setup.suspension, &nodes);
    parts.kinetic *= q;
    parts.gradient *= q;
    parts.mass *= q;
    if let Some(wl) = particle {
        let p = particle_parts(setup, fields, wl, dt, win.particle_levels)?;
        parts.interaction = p.interaction;
        parts.free_particle = p.free_particle;
    }
    Ok(parts)
}

/// Discrete action of the coupled histories.
pub fn action(setup: &ActionSetup, fields: &[FieldState], particle: Option<&Worldline>) -> Result<f64> {
    Ok(action_parts(setup, fields, particle)?.total())
}

/// The three terms of the original (unconcatenated) action, each with its own
/// quadrature: Klein-Gordon over spacetime, interaction over spacetime x
/// lambda, free particle over lambda alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MesonTerms {
    pub kg: f64,
    pub interaction: f64,
    pub free_particle: f64,
}

impl MesonTerms {
    pub fn total(&self) -> f64 {
        self.kg + self.interaction + self.free_particle
    }
}

pub fn meson_terms(setup: &ActionSetup, fields: &[FieldState], wl: &Worldline) -> Result<MesonTerms> {
    let dt = check_alignment(fields, Some(wl))?;
    let last = fields.len() - 1;
    let win = Window {
        slabs: 0..last,
        levels: 0..=last,
        particle_levels: 0..=last,
        cells: None,
        bump: None,
    };
    let kg = kg_parts(setup, fields, dt, &win).kg();
    let weights = trapezoid_weights(wl.len(), dt);
    let slabs: Vec<f64> = (0..last)
        .map(|k| wl.slab(&setup.metric, &setup.eta, k).map(|s| s.s))
        .collect::<Result<_>>()?;
    let mut inter = Vec::new();
    let mut free = Vec::new();
    for k in 0..=last {
        let s = wl.node_norm(&slabs, k);
        free.push(-wl.m * weights[k] * s);
        let st = setup.grid.stencil(&setup.kernel, &wl.x[k])?;
        let mut acc = 0.0;
        st.for_each(|idx, w, _| acc += fields[k].phi[idx] * w);
        inter.push(-wl.eps * weights[k] * s * acc);
    }
    Ok(MesonTerms {
        kg,
        interaction: pairwise_sum(&inter),
        free_particle: pairwise_sum(&free),
    })
}

/// The concatenated action as a sum over lambda x spacetime cells of the
/// pointwise density. The spacetime delta is collapsed onto the field level
/// matching each lambda node, with the spatial kernel on the base; the
/// Klein-Gordon term uses the lambda rule of [`suspension_rule`].
pub fn concatenated_action(setup: &ActionSetup, fields: &[FieldState], wl: &Worldline) -> Result<f64> {
    let dt = check_alignment(fields, Some(wl))?;
    let grid = &setup.grid;
    let last = fields.len() - 1;
    let vol = grid.cell_volume();
    let topo = grid.topology();
    let lw = trapezoid_weights(wl.len(), dt);
    let level_w = trapezoid_weights(fields.len(), dt);
    let slabs: Vec<f64> = (0..last)
        .map(|k| wl.slab(&setup.metric, &setup.eta, k).map(|s| s.s))
        .collect::<Result<_>>()?;
    // Klein-Gordon density over every spacetime sample at unit sqrt(K); its
    // lambda dependence is the factor sqrt(K) alone, so the lambda sum factors
    let mut kg = Vec::new();
    for n in 0..=last {
        let phi = &fields[n].phi;
        let w = level_w[n];
        for i in 0..grid.len() {
            let x = grid.node_event(i, fields[n].t);
            if n < last {
                let mut g = [0.0; MAX_DIM];
                g[0] = (fields[n + 1].phi[i] - phi[i]) / dt;
                let mut xh = x;
                xh[0] += 0.5 * dt;
                kg.push(vol * dt * eval_kg_density(0.0, &g, &xh, 1.0, &setup.metric, setup.mass));
            }
            kg.push(vol * w * eval_kg_density(phi[i], &[0.0; MAX_DIM], &x, 1.0, &setup.metric, setup.mass));
            for a in 0..grid.d {
                if let Some(p) = topo.plus(a, i) {
                    let h = grid.spacing(a);
                    let mut g = [0.0; MAX_DIM];
                    g[a + 1] = (phi[p] - phi[i]) / h;
                    let mut xe = x;
                    xe[a + 1] += 0.5 * h;
                    kg.push(vol * w * eval_kg_density(0.0, &g, &xe, 1.0, &setup.metric, setup.mass));
                }
            }
        }
    }
    let kg = pairwise_sum(&kg);
    let mut outer: Vec<f64> = suspension_rule(&wl.t)
        .iter()
        .map(|&(l, w)| w * setup.suspension.k_density(l) * kg)
        .collect();
    for k in 0..=last {
        // the collapsed delta lives on level k only
        let s = wl.node_norm(&slabs, k);
        let st = grid.stencil(&setup.kernel, &wl.x[k])?;
        let mut inner = Vec::new();
        st.for_each(|idx, w, _| {
            let delta = w / (vol * dt);
            inner.push(-(wl.m + wl.eps * fields[k].phi[idx]) * s * delta * vol * dt);
        });
        outer.push(lw[k] * pairwise_sum(&inner));
    }
    Ok(pairwise_sum(&outer))
}

/// What to vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variation {
    FieldNode { level: usize, node: usize },
    ParticleNode { level: usize, axis: usize },
}

/// Central-difference derivative of the discrete action with respect to one
/// node, plus the largest single-term derivative for normalization.
#[derive(Clone, Copy, Debug)]
pub struct Residual {
    pub derivative: f64,
    pub scale: f64,
}

impl Residual {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.derivative.abs()
        } else {
            self.derivative.abs() / self.scale
        }
    }
}

/// Relative central-difference step used by the oracle.
pub const ORACLE_STEP: f64 = 1e-5;

/// Finite-difference variation of the action. Only terms whose stencil
/// touches the varied node are re-evaluated; all other terms are independent
/// of it. The step is `ORACLE_STEP` times `char_scale`.
pub fn variational_residual(
    setup: &ActionSetup,
    fields: &[FieldState],
    particle: Option<&Worldline>,
    var: Variation,
    char_scale: f64,
) -> Result<Residual> {
    Ok(variational_residuals(setup, fields, particle, &[var], char_scale)?[0])
}

/// Batched form of [`variational_residual`], evaluated in parallel.
pub fn variational_residuals(
    setup: &ActionSetup,
    fields: &[FieldState],
    particle: Option<&Worldline>,
    vars: &[Variation],
    char_scale: f64,
) -> Result<Vec<Residual>> {
    use rayon::prelude::*;
    let dt = check_alignment(fields, particle)?;
    let nodes: Vec<f64> = fields.iter().map(|f| f.t).collect();
    let q = suspension_quadrature(&setup.suspension, &nodes);
    let topo = setup.grid.topology();
    let h = ORACLE_STEP * char_scale;
    vars.par_iter()
        .map(|&var| one_variation(setup, fields, particle, var, h, dt, q, &topo))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn one_variation(
    setup: &ActionSetup,
    fields: &[FieldState],
    particle: Option<&Worldline>,
    var: Variation,
    h: f64,
    dt: f64,
    q: f64,
    topo: &crate::kg_field::Topology,
) -> Result<Residual> {
    let last = fields.len() - 1;
    match var {
        Variation::FieldNode { level, node } => {
            if level == 0 || level >= last {
                return Err(Error::Index(format!(
                    "field level {level} is on the temporal boundary (0 or {last})"
                )));
            }
            if node >= setup.grid.len() {
                return Err(Error::Index(format!("node {node} outside the grid")));
            }
            if !setup.grid.is_periodic() {
                let m = setup.grid.multi_index(node);
                if (0..setup.grid.d).any(|a| m[a] == 0 || m[a] + 1 == setup.grid.n[a]) {
                    return Err(Error::Index(format!("node {node} lies on the spatial boundary")));
                }
            }
            let mut cells = vec![node];
            for a in 0..setup.grid.d {
                if let Some(m) = topo.minus(a, node) {
                    cells.push(m);
                }
            }
            let eval = |delta: f64| -> Result<(ActionParts, Vec<f64>)> {
                let bump = Some((level, node, delta));
                let win = Window {
                    slabs: level - 1..level + 1,
                    levels: level..=level,
                    particle_levels: level..=level,
                    cells: Some(&cells),
                    bump,
                };
                let (mut p, mut terms) = kg_terms(setup, fields, dt, &win);
                p.kinetic *= q;
                p.gradient *= q;
                p.mass *= q;
                terms.iter_mut().for_each(|t| *t *= q);
                if let Some(wl) = particle {
                    let (pp, pt) = particle_terms(setup, fields, wl, dt, win.particle_levels.clone(), bump)?;
                    p.interaction = pp.interaction;
                    // free-particle terms do not depend on the field
                    terms.extend(pt.iter().skip(pt.len() / 2));
                }
                Ok((p, terms))
            };
            Ok(residual_from(eval(h)?, eval(-h)?, h))
        }
        Variation::ParticleNode { level, axis } => {
            let wl = particle.ok_or_else(|| Error::Index("no particle history to vary".into()))?;
            if level == 0 || level >= last {
                return Err(Error::Index(format!(
                    "particle node {level} is a fixed endpoint (0 or {last})"
                )));
            }
            if axis >= wl.d {
                return Err(Error::Index(format!("axis {axis} beyond d = {}", wl.d)));
            }
            let lv = level - 1..=level + 1;
            let eval = |w: &Worldline| particle_terms(setup, fields, w, dt, lv.clone(), None);
            let mut plus = wl.clone();
            plus.x[level][axis] += h;
            let mut minus = wl.clone();
            minus.x[level][axis] -= h;
            Ok(residual_from(eval(&plus)?, eval(&minus)?, h))
        }
    }
}

fn residual_from(plus: (ActionParts, Vec<f64>), minus: (ActionParts, Vec<f64>), h: f64) -> Residual {
    let diff = plus.0.sub(&minus.0);
    let term_max = plus
        .1
        .iter()
        .zip(&minus.1)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Residual {
        derivative: diff.total() / (2.0 * h),
        scale: diff.max_abs().max(term_max) / (2.0 * h),
    }
}

/// Inverse of the pulled-back metric, exposed for density checks.
pub fn fiber_metric_inverse(metric: &Metric, eta: &CovarianceMap, z: &Event) -> Result<crate::geometry::Mat> {
    let g = pullback_metric(metric, eta, z)?;
    mat_inverse(metric.dim(), &g).ok_or_else(|| Error::SingularMap("fiber metric singular".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::StaticProfile;
    use crate::particle::Gauge;

    fn setup1(n: usize, l: f64, mass: f64, t1: f64) -> ActionSetup {
        ActionSetup {
            grid: GridSpec::periodic_cube(1, l, n),
            metric: Metric::minkowski(1),
            eta: CovarianceMap::identity(1),
            kernel: DeltaKernel::default(),
            mass,
            suspension: LambdaMeasure::uniform(0.0, t1),
        }
    }

    fn constant_history(setup: &ActionSetup, c: f64, levels: usize, dt: f64) -> Vec<FieldState> {
        (0..levels)
            .map(|k| FieldState {
                phi: vec![c; setup.grid.len()],
                pi: vec![0.0; setup.grid.len()],
                t: k as f64 * dt,
            })
            .collect()
    }

    #[test]
    fn kg_density_examples() {
        let g = Metric::minkowski(1);
        let x = [0.0; 4];
        assert_eq!(eval_kg_density(0.0, &[0.0; 4], &x, 0.7, &g, 2.0), 0.0);
        let v = eval_kg_density(1.5, &[0.0; 4], &x, 0.7, &g, 2.0);
        assert!((v + 0.5 * 4.0 * 2.25 * 0.7).abs() < 1e-15);
        let v = eval_kg_density(0.0, &[1.0, 0.0, 0.0, 0.0], &x, 0.7, &g, 0.0);
        assert!((v - 0.5 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn particle_density_examples() {
        let g = Metric::minkowski(1);
        let eta = CovarianceMap::identity(1);
        let k = DeltaKernel::default();
        let sp = [0.1, 0.1];
        let mut p = ParticleState::from_physical(1, 0.2, [0.3, 0.0, 0.0], [0.0; 3], 1.3, 0.0, Gauge::ProperTime, &g, &eta)
            .unwrap();
        let peak = eval_particle_density(&p.z, &p, 0.0, &g, &eta, &k, &sp).unwrap();
        let k0 = k.weight(0.0, 0.1);
        assert!((peak + 1.3 * k0 * k0).abs() < 1e-12);
        let far = [0.2, 2.0, 0.0, 0.0];
        assert_eq!(eval_particle_density(&far, &p, 0.0, &g, &eta, &k, &sp).unwrap(), 0.0);

        p.eps = 0.4;
        p.zdot = [1.25, 0.75, 0.0, 0.0];
        let quad = crate::geometry::QuadratureBox {
            lo: [-0.2, -0.2, 0.0, 0.0],
            hi: [0.6, 0.8, 0.0, 0.0],
            points: 400,
        };
        let total = quad.integrate(2, |x| eval_particle_density(x, &p, 0.5, &g, &eta, &k, &sp).unwrap());
        let want = -(1.3 + 0.4 * 0.5) * 1.0;
        assert!((total - want).abs() < 1e-6, "{total}");
        p.zdot = [1.0, 1.0, 0.0, 0.0];
        assert!(matches!(
            eval_particle_density(&p.z, &p, 0.0, &g, &eta, &k, &sp),
            Err(Error::Gauge(_))
        ));
    }

    #[test]
    fn zero_history_has_zero_action() {
        let s = setup1(32, 2.0, 1.0, 1.0);
        let h = constant_history(&s, 0.0, 11, 0.1);
        assert_eq!(action(&s, &h, None).unwrap(), 0.0);
    }

    #[test]
    fn static_constant_field_action_is_mass_term() {
        let (m, c, l, t1) = (1.7, 0.3, 2.0, 1.0);
        let s = setup1(32, l, m, t1);
        let h = constant_history(&s, c, 11, 0.1);
        let a = action(&s, &h, None).unwrap();
        let want = -0.5 * m * m * c * c * l * t1;
        assert!((a - want).abs() < 1e-12, "{a} vs {want}");
    }

    #[test]
    fn kg_action_is_quadratic_in_amplitude() {
        let s = setup1(32, 2.0, 1.1, 1.0);
        let base: Vec<FieldState> = (0..11)
            .map(|k| FieldState {
                phi: (0..32).map(|i| ((i * 3 + k) as f64 * 0.37).sin()).collect(),
                pi: vec![0.0; 32],
                t: k as f64 * 0.1,
            })
            .collect();
        let a1 = action(&s, &base, None).unwrap();
        for alpha in [0.5, 2.0, 3.0] {
            let scaled: Vec<FieldState> = base
                .iter()
                .map(|f| FieldState {
                    phi: f.phi.iter().map(|v| v * alpha).collect(),
                    ..f.clone()
                })
                .collect();
            let a = action(&s, &scaled, None).unwrap();
            assert!((a - alpha * alpha * a1).abs() < 1e-12 * a1.abs().max(1.0));
        }
    }

    #[test]
    fn misaligned_histories_are_rejected() {
        let s = setup1(16, 2.0, 1.0, 1.0);
        let h = constant_history(&s, 0.0, 5, 0.1);
        let wl = Worldline {
            d: 1,
            t: vec![0.0, 0.1, 0.2, 0.3],
            x: vec![[0.0; 3]; 4],
            m: 1.0,
            eps: 0.0,
        };
        assert!(matches!(action(&s, &h, Some(&wl)), Err(Error::Alignment(_))));
        let mut wl2 = wl.clone();
        wl2.t = vec![0.0, 0.1, 0.2, 0.35, 0.4];
        wl2.x = vec![[0.0; 3]; 5];
        assert!(matches!(action(&s, &h, Some(&wl2)), Err(Error::Alignment(_))));
    }

    #[test]
    fn suspension_equivalence_examples() {
        let nodes: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
        let u = LambdaMeasure::uniform(0.0, 1.0);
        assert_eq!(suspension_equivalence(3.7, &nodes, &u, &u).unwrap(), 0.0);
        let t = LambdaMeasure::triangular(0.0, 1.0);
        assert!(suspension_equivalence(3.7, &nodes, &u, &t).unwrap() < 1e-8);
        let mut bad = t;
        bad.scale = 2.0;
        assert!(matches!(
            suspension_equivalence(3.7, &nodes, &u, &bad),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn boundary_variations_are_index_errors() {
        let s = setup1(16, 2.0, 1.0, 1.0);
        let h = constant_history(&s, 0.1, 5, 0.1);
        for level in [0, 4] {
            let r = variational_residual(&s, &h, None, Variation::FieldNode { level, node: 3 }, 1.0);
            assert!(matches!(r, Err(Error::Index(_))));
        }
        let wl = Worldline {
            d: 1,
            t: (0..5).map(|k| k as f64 * 0.1).collect(),
            x: vec![[0.0; 3]; 5],
            m: 1.0,
            eps: 0.0,
        };
        let r = variational_residual(&s, &h, Some(&wl), Variation::ParticleNode { level: 0, axis: 0 }, 1.0);
        assert!(matches!(r, Err(Error::Index(_))));
    }

    #[test]
    fn straight_line_is_stationary() {
        let s = setup1(32, 4.0, 1.0, 1.0);
        let dt = 0.05;
        let h = constant_history(&s, 0.0, 21, dt);
        let wl = Worldline {
            d: 1,
            t: (0..21).map(|k| k as f64 * dt).collect(),
            x: (0..21).map(|k| [0.1 + 0.6 * k as f64 * dt, 0.0, 0.0]).collect(),
            m: 1.0,
            eps: 0.0,
        };
        for level in 1..20 {
            let r = variational_residual(&s, &h, Some(&wl), Variation::ParticleNode { level, axis: 0 }, 1.0).unwrap();
            assert!(r.relative() < 1e-8, "level {level}: {:?}", r);
        }
        let mut bent = wl.clone();
        bent.x[10][0] += 1e-2;
        let r = variational_residual(&s, &h, Some(&bent), Variation::ParticleNode { level: 10, axis: 0 }, 1.0).unwrap();
        assert!(r.relative() > 1e-4);
    }

    #[test]
    fn static_metric_densities_use_volume_factor() {
        let prof = StaticProfile {
            amplitude: 0.1,
            center: [0.0; 3],
            width: 1.0,
        };
        let g = Metric::static_diagonal(1, prof);
        let x = [0.0, 0.0, 0.0, 0.0];
        let v = eval_kg_density(1.0, &[0.0; 4], &x, 1.0, &g, 1.0);
        assert!((v + 0.5 * g.vol_density(&x)).abs() < 1e-15);
    }
}
