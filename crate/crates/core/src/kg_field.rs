//! Grid discretization of the Klein-Gordon field: leapfrog stepping with a
//! particle source, kernel deposition and interpolation, field energy.
//!
//! Nodes sit at cell centres `x_i = -L/2 + (i + 1/2) h` on every axis and are
//! stored row-major (last axis fastest). The field state carries `phi` at
//! integer time levels and `pi = d phi / dt` at the preceding half level.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DeltaKernel, Event, Metric};
use crate::util::pairwise_sum;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Reflecting,
    /// Reflecting walls plus an absorbing layer of the given physical width.
    Sponge { width: f64, damping: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub d: usize,
    pub extents: Vec<f64>,
    pub n: Vec<usize>,
    pub boundary: Boundary,
}

const NONE: u32 = u32::MAX;

impl GridSpec {
    pub fn new(d: usize, extents: Vec<f64>, n: Vec<usize>, boundary: Boundary) -> Result<Self> {
        let g = GridSpec {
            d,
            extents,
            n,
            boundary,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn periodic_cube(d: usize, extent: f64, n: usize) -> Self {
        GridSpec::new(d, vec![extent; d], vec![n; d], Boundary::Periodic).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.d) {
            return Err(Error::config("grid.d", "spatial dimension must be 1, 2 or 3"));
        }
        if self.extents.len() != self.d || self.n.len() != self.d {
            return Err(Error::config(
                "grid",
                "extents and n must have one entry per spatial axis",
            ));
        }
        for a in 0..self.d {
            if !(self.extents[a] > 0.0) || self.n[a] < 4 {
                return Err(Error::config(
                    "grid",
                    format!("axis {a} needs a positive extent and at least 4 cells"),
                ));
            }
        }
        Ok(())
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.extents[axis] / self.n[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.d).map(|a| self.spacing(a)).fold(f64::INFINITY, f64::min)
    }

    pub fn lo(&self, axis: usize) -> f64 {
        -0.5 * self.extents[axis]
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.d).map(|a| self.spacing(a)).product()
    }

    pub fn volume(&self) -> f64 {
        self.extents.iter().product()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.boundary, Boundary::Periodic)
    }

    fn dims3(&self) -> [usize; 3] {
        let mut n = [1; 3];
        n[..self.d].copy_from_slice(&self.n[..self.d]);
        n
    }

    pub fn strides(&self) -> [usize; 3] {
        let n = self.dims3();
        [n[1] * n[2], n[2], 1]
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        let n = self.dims3();
        [idx / (n[1] * n[2]), (idx / n[2]) % n[1], idx % n[2]]
    }

    pub fn flat_index(&self, m: [usize; 3]) -> usize {
        let s = self.strides();
        m[0] * s[0] + m[1] * s[1] + m[2] * s[2]
    }

    pub fn node_coord(&self, axis: usize, i: usize) -> f64 {
        self.lo(axis) + (i as f64 + 0.5) * self.spacing(axis)
    }

    /// Spacetime event of node `idx` at time `t`.
    pub fn node_event(&self, idx: usize, t: f64) -> Event {
        let m = self.multi_index(idx);
        let mut e = [0.0; 4];
        e[0] = t;
        for a in 0..self.d {
            e[a + 1] = self.node_coord(a, m[a]);
        }
        e
    }

    /// Minimum-image displacement `x - y` along an axis.
    pub fn displacement(&self, axis: usize, x: f64, y: f64) -> f64 {
        let mut dx = x - y;
        if self.is_periodic() {
            let l = self.extents[axis];
            dx -= l * (dx / l).round();
        }
        dx
    }

    /// Neighbour tables for the stencil.
    pub fn topology(&self) -> Topology {
        let len = self.len();
        let mut plus = vec![vec![NONE; len]; self.d];
        let mut minus = vec![vec![NONE; len]; self.d];
        let s = self.strides();
        for idx in 0..len {
            let m = self.multi_index(idx);
            for a in 0..self.d {
                let n = self.n[a];
                let base = idx - m[a] * s[a];
                let p = if m[a] + 1 < n {
                    Some(m[a] + 1)
                } else if self.is_periodic() {
                    Some(0)
                } else {
                    None
                };
                let q = if m[a] > 0 {
                    Some(m[a] - 1)
                } else if self.is_periodic() {
                    Some(n - 1)
                } else {
                    None
                };
                if let Some(p) = p {
                    plus[a][idx] = (base + p * s[a]) as u32;
                }
                if let Some(q) = q {
                    minus[a][idx] = (base + q * s[a]) as u32;
                }
            }
        }
        Topology { plus, minus }
    }

    /// Stability bound `CFL * min(h) / sqrt(d)` for flat space.
    pub fn max_stable_dt(&self, cfl: f64) -> f64 {
        cfl * self.min_spacing() / (self.d as f64).sqrt()
    }

    /// Kernel stencil around spatial point `x` (one per axis). Weights are
    /// normalized to sum to one; `deriv` holds their derivative with respect to
    /// the particle coordinate.
    pub fn stencil(&self, kernel: &DeltaKernel, x: &[f64]) -> Result<Stencil> {
        let mut axes: Vec<AxisStencil> = Vec::with_capacity(self.d);
        let r = kernel.support_radius();
        for a in 0..self.d {
            let h = self.spacing(a);
            let n = self.n[a] as i64;
            let u = (x[a] - self.lo(a)) / h - 0.5;
            let j0 = (u - r).ceil() as i64;
            let j1 = (u + r).floor() as i64;
            let mut idx = Vec::with_capacity((j1 - j0 + 1).max(0) as usize);
            let mut w = Vec::with_capacity(idx.capacity());
            let mut dw = Vec::with_capacity(idx.capacity());
            for j in j0..=j1 {
                let off = j as f64 - u;
                let v = kernel.value_cells(off);
                if v == 0.0 {
                    continue;
                }
                let jj = if (0..n).contains(&j) {
                    j
                } else if self.is_periodic() {
                    j.rem_euclid(n)
                } else {
                    return Err(Error::Boundary(format!(
                        "kernel around x[{a}] = {} reaches node {j} outside 0..{n}",
                        x[a]
                    )));
                };
                idx.push(jj as usize);
                w.push(v);
                dw.push(-kernel.deriv_cells(off) / h);
            }
            if w.is_empty() {
                return Err(Error::Boundary(format!("empty stencil at x[{a}] = {}", x[a])));
            }
            let s: f64 = w.iter().sum();
            let ds: f64 = dw.iter().sum();
            let deriv: Vec<f64> = w
                .iter()
                .zip(&dw)
                .map(|(&wi, &dwi)| (dwi * s - wi * ds) / (s * s))
                .collect();
            let weight: Vec<f64> = w.iter().map(|wi| wi / s).collect();
            axes.push(AxisStencil {
                index: idx,
                weight,
                deriv,
            });
        }
        Ok(Stencil {
            axes,
            strides: self.strides(),
        })
    }

    /// Whether `x` lies inside the box (always true for periodic grids).
    pub fn contains(&self, x: &[f64]) -> bool {
        self.is_periodic()
            || (0..self.d).all(|a| x[a] >= self.lo(a) && x[a] <= self.lo(a) + self.extents[a])
    }
}

#[derive(Clone, Debug)]
pub struct Topology {
    plus: Vec<Vec<u32>>,
    minus: Vec<Vec<u32>>,
}

impl Topology {
    pub fn plus(&self, axis: usize, idx: usize) -> Option<usize> {
        let p = self.plus[axis][idx];
        (p != NONE).then_some(p as usize)
    }

    pub fn minus(&self, axis: usize, idx: usize) -> Option<usize> {
        let p = self.minus[axis][idx];
        (p != NONE).then_some(p as usize)
    }
}

#[derive(Clone, Debug)]
pub struct AxisStencil {
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
    pub deriv: Vec<f64>,
}

/// Tensor-product kernel stencil on the grid.
#[derive(Clone, Debug)]
pub struct Stencil {
    pub axes: Vec<AxisStencil>,
    strides: [usize; 3],
}

impl Stencil {
    /// Visit `(flat index, weight, d weight / d x_particle)` for every node in
    /// the support.
    pub fn for_each(&self, mut f: impl FnMut(usize, f64, [f64; 3])) {
        let d = self.axes.len();
        let one = AxisStencil {
            index: vec![0],
            weight: vec![1.0],
            deriv: vec![0.0],
        };
        let ax = |a: usize| if a < d { &self.axes[a] } else { &one };
        let (a0, a1, a2) = (ax(0), ax(1), ax(2));
        for i in 0..a0.index.len() {
            for j in 0..a1.index.len() {
                for k in 0..a2.index.len() {
                    let idx = a0.index[i] * self.strides[0]
                        + a1.index[j] * self.strides[1]
                        + a2.index[k] * self.strides[2];
                    let w = a0.weight[i] * a1.weight[j] * a2.weight[k];
                    let g = [
                        a0.deriv[i] * a1.weight[j] * a2.weight[k],
                        a0.weight[i] * a1.deriv[j] * a2.weight[k],
                        a0.weight[i] * a1.weight[j] * a2.deriv[k],
                    ];
                    f(idx, w, g);
                }
            }
        }
    }

    /// Kernel-weighted value and gradient of a nodal array.
    pub fn sample(&self, values: &[f64]) -> (f64, [f64; 3]) {
        let mut v = 0.0;
        let mut g = [0.0; 3];
        self.for_each(|idx, w, dw| {
            v += w * values[idx];
            for a in 0..3 {
                g[a] += dw[a] * values[idx];
            }
        });
        (v, g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    /// Field at time level `t`.
    pub phi: Vec<f64>,
    /// Time derivative at `t - dt/2`.
    pub pi: Vec<f64>,
    pub t: f64,
}

impl FieldState {
    pub fn zeros(grid: &GridSpec, t: f64) -> Self {
        FieldState {
            phi: vec![0.0; grid.len()],
            pi: vec![0.0; grid.len()],
            t,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.phi.iter().chain(&self.pi).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence(format!("non-finite field value at t = {}", self.t)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceGrid {
    /// Source density per unit volume.
    pub rho: Vec<f64>,
    pub t: f64,
}

impl SourceGrid {
    pub fn zeros(grid: &GridSpec, t: f64) -> Self {
        SourceGrid {
            rho: vec![0.0; grid.len()],
            t,
        }
    }

    pub fn total(&self, grid: &GridSpec) -> f64 {
        pairwise_sum(&self.rho) * grid.cell_volume()
    }
}

/// Static diagonal metric folded into stencil coefficients:
/// `ct = sqrt|G| G^00`, `cx[a] = -sqrt|G| G^aa` on the edge towards the plus
/// neighbour, `cm = sqrt|G|`.
#[derive(Clone, Debug)]
pub struct KgCoefficients {
    pub ct: Vec<f64>,
    pub cm: Vec<f64>,
    pub cx: Vec<Vec<f64>>,
    pub flat: bool,
}

impl KgCoefficients {
    pub fn new(grid: &GridSpec, metric: &Metric) -> Result<Self> {
        let len = grid.len();
        if metric.d != grid.d {
            return Err(Error::config("metric", "metric and grid dimensions differ"));
        }
        if metric.is_minkowski() {
            return Ok(KgCoefficients {
                ct: vec![1.0; len],
                cm: vec![1.0; len],
                cx: vec![vec![1.0; len]; grid.d],
                flat: true,
            });
        }
        if !metric.is_static_diagonal() {
            return Err(Error::Unsupported(
                "grid solver needs a static diagonal background metric".into(),
            ));
        }
        let mut ct = vec![0.0; len];
        let mut cm = vec![0.0; len];
        let mut cx = vec![vec![0.0; len]; grid.d];
        for idx in 0..len {
            let x = grid.node_event(idx, 0.0);
            let g = metric.components(&x);
            let vol = metric.vol_density(&x);
            ct[idx] = vol / g[0][0];
            cm[idx] = vol;
            for a in 0..grid.d {
                let mut xe = x;
                xe[a + 1] += 0.5 * grid.spacing(a);
                let ge = metric.components(&xe);
                cx[a][idx] = -metric.vol_density(&xe) / ge[a + 1][a + 1];
            }
        }
        Ok(KgCoefficients {
            ct,
            cm,
            cx,
            flat: false,
        })
    }

    /// Largest local propagation speed.
    pub fn max_speed(&self) -> f64 {
        let mut c: f64 = 1.0;
        if !self.flat {
            c = 0.0;
            for idx in 0..self.ct.len() {
                for cx in &self.cx {
                    c = c.max((cx[idx] / self.ct[idx]).sqrt());
                }
            }
        }
        c
    }
}

/// Leapfrog integrator for the sourced Klein-Gordon equation on a fixed grid.
#[derive(Clone)]
pub struct KgSolver {
    pub grid: GridSpec,
    pub mass: f64,
    pub dt: f64,
    pub coeffs: KgCoefficients,
    topo: Arc<Topology>,
    damping: Option<Vec<f64>>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl KgSolver {
    pub fn new(grid: &GridSpec, metric: &Metric, mass: f64, dt: f64) -> Result<Self> {
        let coeffs = KgCoefficients::new(grid, metric)?;
        let limit = 0.9 * grid.min_spacing() / ((grid.d as f64).sqrt() * coeffs.max_speed());
        if !(dt > 0.0) || dt > limit {
            return Err(Error::Stability(format!(
                "dt = {dt} exceeds the bound {limit} (CFL 0.9)"
            )));
        }
        let damping = match grid.boundary {
            Boundary::Sponge { width, damping } => {
                let mut sigma = vec![0.0; grid.len()];
                for (idx, s) in sigma.iter_mut().enumerate() {
                    let m = grid.multi_index(idx);
                    let mut depth: f64 = 0.0;
                    for a in 0..grid.d {
                        let x = grid.node_coord(a, m[a]);
                        let dist = (0.5 * grid.extents[a] - x.abs()).max(0.0);
                        if dist < width {
                            depth = depth.max(1.0 - dist / width);
                        }
                    }
                    *s = damping * depth * depth;
                }
                Some(sigma)
            }
            _ => None,
        };
        Ok(KgSolver {
            grid: grid.clone(),
            mass,
            dt,
            coeffs,
            topo: Arc::new(grid.topology()),
            damping,
            pool: None,
        })
    }

    /// Fan stencil updates out over `threads` workers (1 keeps everything on
    /// the calling thread).
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::config("threads", e.to_string()))?;
            self.pool = Some(Arc::new(pool));
        }
        Ok(self)
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    fn node_flux(&self, phi: &[f64], idx: usize) -> f64 {
        let mut acc = 0.0;
        for a in 0..self.grid.d {
            let h2 = self.grid.spacing(a).powi(2);
            let cx = &self.coeffs.cx[a];
            if let Some(p) = self.topo.plus(a, idx) {
                acc += cx[idx] * (phi[p] - phi[idx]) / h2;
            }
            if let Some(m) = self.topo.minus(a, idx) {
                acc -= cx[m] * (phi[idx] - phi[m]) / h2;
            }
        }
        acc
    }

    /// Weighted discrete Laplacian `sum_a D_a (cx D_a phi)` into `out`.
    pub fn flux_divergence(&self, phi: &[f64], out: &mut [f64]) {
        let run = |out: &mut [f64]| {
            out.par_iter_mut()
                .enumerate()
                .with_min_len(4096)
                .for_each(|(idx, o)| *o = self.node_flux(phi, idx));
        };
        match &self.pool {
            Some(pool) => pool.install(|| run(out)),
            None => {
                for (idx, o) in out.iter_mut().enumerate() {
                    *o = self.node_flux(phi, idx);
                }
            }
        }
    }

    /// `d^2 phi / dt^2` at every node for the given source.
    pub fn acceleration(&self, phi: &[f64], rho: &[f64], out: &mut [f64]) {
        self.flux_divergence(phi, out);
        let m2 = self.mass * self.mass;
        let c = &self.coeffs;
        for idx in 0..out.len() {
            out[idx] = (out[idx] - c.cm[idx] * (m2 * phi[idx] + rho[idx])) / c.ct[idx];
        }
    }

    /// Builds the leapfrog state at `t0` from `phi(t0)` and `d phi/dt (t0)`.
    pub fn initial_state(
        &self,
        phi: Vec<f64>,
        phi_dot: &[f64],
        src: &SourceGrid,
        t0: f64,
    ) -> FieldState {
        let mut acc = vec![0.0; phi.len()];
        self.acceleration(&phi, &src.rho, &mut acc);
        let pi = phi_dot
            .iter()
            .zip(&acc)
            .map(|(v, a)| v - 0.5 * self.dt * a)
            .collect();
        FieldState { phi, pi, t: t0 }
    }

    /// One leapfrog step: kick with the source at the current level, then drift.
    pub fn step(&self, s: &FieldState, src: &SourceGrid) -> Result<FieldState> {
        if (src.t - s.t).abs() > 1e-9 * self.dt.max(1.0) {
            return Err(Error::Alignment(format!(
                "source at t = {} applied to field at t = {}",
                src.t, s.t
            )));
        }
        let mut acc = vec![0.0; s.phi.len()];
        self.acceleration(&s.phi, &src.rho, &mut acc);
        let mut pi: Vec<f64> = s.pi.iter().zip(&acc).map(|(p, a)| p + self.dt * a).collect();
        if let Some(sigma) = &self.damping {
            for (p, sg) in pi.iter_mut().zip(sigma) {
                *p *= (-sg * self.dt).exp();
            }
        }
        let phi = s.phi.iter().zip(&pi).map(|(f, p)| f + self.dt * p).collect();
        let next = FieldState {
            phi,
            pi,
            t: s.t + self.dt,
        };
        next.check_finite()?;
        Ok(next)
    }

    /// Conserved leapfrog energy at the level of `cur`, using the forward half
    /// step derivative `pi_next` (the `pi` of the following state).
    pub fn energy(&self, cur: &FieldState, pi_next: &[f64]) -> f64 {
        let dens = self.energy_density(cur, pi_next);
        pairwise_sum(&dens) * self.grid.cell_volume()
    }

    /// Per-node energy density: `1/2 ct pi- pi+`, the average of the two
    /// one-sided squared gradients and the mass term.
    pub fn energy_density(&self, cur: &FieldState, pi_next: &[f64]) -> Vec<f64> {
        let c = &self.coeffs;
        let m2 = self.mass * self.mass;
        (0..cur.phi.len())
            .map(|idx| {
                let phi = &cur.phi;
                let mut e = 0.5 * c.ct[idx] * cur.pi[idx] * pi_next[idx]
                    + 0.5 * c.cm[idx] * m2 * phi[idx] * phi[idx];
                for a in 0..self.grid.d {
                    let h = self.grid.spacing(a);
                    if let Some(p) = self.topo.plus(a, idx) {
                        let g = (phi[p] - phi[idx]) / h;
                        e += 0.25 * c.cx[a][idx] * g * g;
                    }
                    if let Some(m) = self.topo.minus(a, idx) {
                        let g = (phi[idx] - phi[m]) / h;
                        e += 0.25 * c.cx[a][m] * g * g;
                    }
                }
                e
            })
            .collect()
    }

    /// `A phi = -D(cx D phi) + cm M^2 phi`, the static operator.
    pub fn apply_static(&self, phi: &[f64], out: &mut [f64]) {
        self.flux_divergence(phi, out);
        let m2 = self.mass * self.mass;
        for idx in 0..out.len() {
            out[idx] = -out[idx] + self.coeffs.cm[idx] * m2 * phi[idx];
        }
    }
}

/// Spatial part of a spacetime event.
pub fn spatial(x: &Event, d: usize) -> [f64; 3] {
    let mut s = [0.0; 3];
    s[..d].copy_from_slice(&x[1..=d]);
    s
}

/// Deposits a point source of total strength `strength` at spatial point `x`.
/// The density carries the `1/sqrt|G|` factor of a scalar source.
pub fn deposit_point(
    grid: &GridSpec,
    metric: &Metric,
    kernel: &DeltaKernel,
    x: &[f64],
    strength: f64,
    t: f64,
    into: &mut SourceGrid,
) -> Result<()> {
    if !grid.contains(x) {
        return Err(Error::Escape(format!("particle at {:?} is outside the grid", &x[..grid.d])));
    }
    let st = grid.stencil(kernel, x).map_err(|e| match e {
        Error::Boundary(m) => Error::Escape(m),
        other => other,
    })?;
    let vol = grid.cell_volume();
    let flat = metric.is_minkowski();
    st.for_each(|idx, w, _| {
        let g = if flat {
            1.0
        } else {
            metric.vol_density(&grid.node_event(idx, t))
        };
        into.rho[idx] += strength * w / (vol * g);
    });
    into.t = t;
    Ok(())
}

/// Field value, spatial gradient and time derivative at spatial point `x`,
/// with the same kernel used for deposition. `pi` is taken as-is from the
/// state.
pub fn interpolate_field(
    grid: &GridSpec,
    s: &FieldState,
    x: &[f64],
    kernel: &DeltaKernel,
) -> Result<(f64, [f64; 3], f64)> {
    let st = grid.stencil(kernel, x)?;
    let (phi, grad) = st.sample(&s.phi);
    let (pi, _) = st.sample(&s.pi);
    Ok((phi, grad, pi))
}

/// Discrete L2 norm over the grid.
pub fn l2_norm(grid: &GridSpec, v: &[f64]) -> f64 {
    let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    (pairwise_sum(&sq) * grid.cell_volume()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{KernelShape, StaticProfile};

    fn grid1(n: usize, l: f64) -> GridSpec {
        GridSpec::periodic_cube(1, l, n)
    }

    #[test]
    fn zero_state_stays_zero() {
        let g = grid1(64, 2.0);
        let solver = KgSolver::new(&g, &Metric::minkowski(1), 1.0, 0.5 * g.spacing(0)).unwrap();
        let s = FieldState::zeros(&g, 0.0);
        let next = solver.step(&s, &SourceGrid::zeros(&g, 0.0)).unwrap();
        assert!(next.phi.iter().all(|&v| v == 0.0));
        assert!(next.pi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cfl_violation_is_named() {
        let g = grid1(64, 2.0);
        let err = KgSolver::new(&g, &Metric::minkowski(1), 1.0, g.spacing(0)).err();
        assert!(matches!(err, Some(Error::Stability(_))));
    }

    #[test]
    fn nan_is_reported_as_divergence() {
        let g = grid1(16, 2.0);
        let solver = KgSolver::new(&g, &Metric::minkowski(1), 1.0, 0.05).unwrap();
        let mut s = FieldState::zeros(&g, 0.0);
        s.phi[3] = f64::NAN;
        assert!(matches!(
            solver.step(&s, &SourceGrid::zeros(&g, 0.0)),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn deposit_at_rest_on_node() {
        let g = grid1(64, 4.0);
        let k = DeltaKernel::default();
        let x = [g.node_coord(0, 20), 0.0, 0.0];
        let mut src = SourceGrid::zeros(&g, 0.0);
        deposit_point(&g, &Metric::minkowski(1), &k, &x, 0.7, 0.0, &mut src).unwrap();
        assert!((src.total(&g) - 0.7).abs() < 1e-14);
        let peak = src.rho.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(src.rho[20], peak);
    }

    #[test]
    fn deposit_outside_grid_escapes() {
        let g = GridSpec::new(1, vec![4.0], vec![32], Boundary::Reflecting).unwrap();
        let mut src = SourceGrid::zeros(&g, 0.0);
        let r = deposit_point(
            &g,
            &Metric::minkowski(1),
            &DeltaKernel::default(),
            &[3.0, 0.0, 0.0],
            1.0,
            0.0,
            &mut src,
        );
        assert!(matches!(r, Err(Error::Escape(_))));
        let r = deposit_point(
            &g,
            &Metric::minkowski(1),
            &DeltaKernel::default(),
            &[1.99, 0.0, 0.0],
            1.0,
            0.0,
            &mut src,
        );
        assert!(matches!(r, Err(Error::Escape(_))));
    }

    #[test]
    fn interpolation_partition_and_linear_reproduction() {
        let g = GridSpec::periodic_cube(2, 4.0, 32);
        let k = DeltaKernel::default();
        let mut s = FieldState::zeros(&g, 0.0);
        for v in s.phi.iter_mut() {
            *v = 2.5;
        }
        let (phi, grad, _) = interpolate_field(&g, &s, &[0.137, -0.41, 0.0], &k).unwrap();
        assert!((phi - 2.5).abs() < 1e-14);
        assert!(grad[0].abs() < 1e-13 && grad[1].abs() < 1e-13);

        let rg = GridSpec::new(2, vec![4.0, 4.0], vec![32, 32], Boundary::Reflecting).unwrap();
        let mut s = FieldState::zeros(&rg, 0.0);
        for idx in 0..rg.len() {
            let e = rg.node_event(idx, 0.0);
            s.phi[idx] = 0.3 * e[1] - 1.7 * e[2] + 0.2;
        }
        let x = [0.137, -0.41, 0.0];
        let (phi, grad, _) = interpolate_field(&rg, &s, &x, &k).unwrap();
        assert!((phi - (0.3 * x[0] - 1.7 * x[1] + 0.2)).abs() < 1e-12);
        assert!((grad[0] - 0.3).abs() < 1e-12);
        assert!((grad[1] + 1.7).abs() < 1e-12);
        assert!(matches!(
            interpolate_field(&rg, &s, &[1.95, 0.0, 0.0], &k),
            Err(Error::Boundary(_))
        ));
    }

    #[test]
    fn narrow_kernel_returns_nodal_value() {
        let g = grid1(32, 4.0);
        let mut s = FieldState::zeros(&g, 0.0);
        for (i, v) in s.phi.iter_mut().enumerate() {
            *v = (i as f64 * 0.3).sin();
        }
        let k = DeltaKernel::new(KernelShape::BsplineQuadratic, 0.5);
        let (phi, _, _) = interpolate_field(&g, &s, &[g.node_coord(0, 7), 0.0, 0.0], &k).unwrap();
        assert!((phi - s.phi[7]).abs() < 1e-15);
    }

    #[test]
    fn deposition_and_interpolation_are_adjoint() {
        let g = GridSpec::periodic_cube(3, 3.0, 12);
        let k = DeltaKernel::new(KernelShape::BsplineCubic, 4.0);
        let mut s = FieldState::zeros(&g, 0.0);
        for (i, v) in s.phi.iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64 / 50.0 - 1.0;
        }
        let x = [0.31, -1.4, 0.77];
        let q = 0.37;
        let mut src = SourceGrid::zeros(&g, 0.0);
        deposit_point(&g, &Metric::minkowski(3), &k, &x, q, 0.0, &mut src).unwrap();
        let lhs: f64 = src.rho.iter().zip(&s.phi).map(|(r, p)| r * p).sum::<f64>() * g.cell_volume();
        let (phi, _, _) = interpolate_field(&g, &s, &x, &k).unwrap();
        assert!((lhs - q * phi).abs() < 1e-12);
    }

    #[test]
    fn interpolated_gradient_matches_finite_difference_of_value() {
        let g = GridSpec::periodic_cube(2, 3.0, 24);
        let k = DeltaKernel::default();
        let mut s = FieldState::zeros(&g, 0.0);
        for idx in 0..g.len() {
            let e = g.node_event(idx, 0.0);
            s.phi[idx] = (2.0 * e[1]).sin() * (e[2]).cos();
        }
        let x = [0.123, 0.456, 0.0];
        let (_, grad, _) = interpolate_field(&g, &s, &x, &k).unwrap();
        for a in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += 1e-6;
            xm[a] -= 1e-6;
            let fp = interpolate_field(&g, &s, &xp, &k).unwrap().0;
            let fm = interpolate_field(&g, &s, &xm, &k).unwrap().0;
            assert!(((fp - fm) / 2e-6 - grad[a]).abs() < 1e-7);
        }
    }

    #[test]
    fn static_field_energy_is_mass_term() {
        let g = GridSpec::periodic_cube(2, 3.0, 16);
        let m = 1.3;
        let solver = KgSolver::new(&g, &Metric::minkowski(2), m, 0.05).unwrap();
        let c = 0.4;
        let s = FieldState {
            phi: vec![c; g.len()],
            pi: vec![0.0; g.len()],
            t: 0.0,
        };
        let e = solver.energy(&s, &vec![0.0; g.len()]);
        assert!((e - 0.5 * m * m * c * c * g.volume()).abs() < 1e-12);
        assert_eq!(solver.energy(&FieldState::zeros(&g, 0.0), &vec![0.0; g.len()]), 0.0);
    }

    #[test]
    fn leapfrog_energy_is_conserved_for_free_field() {
        let g = grid1(128, 8.0);
        let dt = 0.5 * g.spacing(0);
        let solver = KgSolver::new(&g, &Metric::minkowski(1), 1.0, dt).unwrap();
        let mut phi = vec![0.0; g.len()];
        for (i, v) in phi.iter_mut().enumerate() {
            let x = g.node_coord(0, i);
            *v = (-x * x).exp();
        }
        let zero = SourceGrid::zeros(&g, 0.0);
        let mut s = solver.initial_state(phi, &vec![0.0; g.len()], &zero, 0.0);
        let mut src = zero.clone();
        let mut next = solver.step(&s, &src).unwrap();
        let e0 = solver.energy(&s, &next.pi);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            s = next;
            src.t = s.t;
            next = solver.step(&s, &src).unwrap();
            let e = solver.energy(&s, &next.pi);
            worst = worst.max((e - e0).abs() / e0);
        }
        assert!(worst < 1e-10, "relative drift {worst}");
        assert!(e0 > 0.0);
    }

    #[test]
    fn static_metric_coefficients_are_positive_and_stable() {
        let g = grid1(64, 4.0);
        let metric = Metric::static_diagonal(
            1,
            StaticProfile {
                amplitude: 0.1,
                center: [0.0; 3],
                width: 0.5,
            },
        );
        let solver = KgSolver::new(&g, &metric, 1.0, 0.3 * g.spacing(0)).unwrap();
        assert!(solver.coeffs.ct.iter().all(|&c| c > 0.0));
        assert!(solver.coeffs.max_speed() > 1.0);
    }

    #[test]
    fn sponge_damps_outgoing_waves() {
        let g = GridSpec::new(
            1,
            vec![20.0],
            vec![400],
            Boundary::Sponge {
                width: 4.0,
                damping: 5.0,
            },
        )
        .unwrap();
        let dt = 0.5 * g.spacing(0);
        let solver = KgSolver::new(&g, &Metric::minkowski(1), 0.0, dt).unwrap();
        let phi: Vec<f64> = (0..g.len())
            .map(|i| {
                let x = g.node_coord(0, i);
                (-4.0 * x * x).exp()
            })
            .collect();
        let zero = SourceGrid::zeros(&g, 0.0);
        let mut s = solver.initial_state(phi, &vec![0.0; g.len()], &zero, 0.0);
        let mut src = zero;
        let first = solver.step(&s, &src).unwrap();
        let e0 = solver.energy(&s, &first.pi);
        for _ in 0..(30.0 / dt) as usize {
            src.t = s.t;
            s = solver.step(&s, &src).unwrap();
        }
        src.t = s.t;
        let nx = solver.step(&s, &src).unwrap();
        let e1 = solver.energy(&s, &nx.pi);
        assert!(e1 < 0.05 * e0, "reflected fraction {}", e1 / e0);
    }
}
