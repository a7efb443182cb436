//! Relativistic particle with field-dependent effective mass `m + eps*phi`.
//!
//! The particle lives in fiber coordinates `z^a`; its physical event is
//! `eta^{-1}(z)`. The evolved quantity is the effective momentum
//! `pi_a = (m + eps phi) g_ab zdot^b / |zdot|`, which obeys
//!
//! ```text
//! d pi_a / d lambda = eps kappa^mu_a phi_{,mu} |zdot|
//!                     + (m + eps phi) g_{bc,a} zdot^b zdot^c / (2 |zdot|)
//! ```
//!
//! with `|zdot|^2 = g_ab zdot^a zdot^b > 0` for timelike motion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    mat_inverse, pullback_metric, pullback_metric_derivs, quad_form, CovarianceMap, DeltaKernel,
    Event, Metric, MAX_DIM,
};
use crate::kg_field::{interpolate_field, FieldState, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    ProperTime,
    CoordinateTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub d: usize,
    /// Fiber coordinates.
    pub z: Event,
    /// `dz / d lambda`.
    pub zdot: Event,
    pub lambda: f64,
    pub gauge: Gauge,
    pub m: f64,
    pub eps: f64,
}

impl ParticleState {
    /// Particle at physical position `x` and time `t` moving with coordinate
    /// velocity `v`, expressed in the requested gauge.
    #[allow(clippy::too_many_arguments)]
    pub fn from_physical(
        d: usize,
        t: f64,
        x: [f64; 3],
        v: [f64; 3],
        m: f64,
        eps: f64,
        gauge: Gauge,
        metric: &Metric,
        eta: &CovarianceMap,
    ) -> Result<Self> {
        let n = d + 1;
        let mut pos = [0.0; MAX_DIM];
        let mut vel = [0.0; MAX_DIM];
        pos[0] = t;
        vel[0] = 1.0;
        pos[1..=d].copy_from_slice(&x[..d]);
        vel[1..=d].copy_from_slice(&v[..d]);
        let z = eta.forward(&pos);
        let j = eta.jacobian(&pos);
        let mut zdot = [0.0; MAX_DIM];
        for a in 0..n {
            for mu in 0..n {
                zdot[a] += j[a][mu] * vel[mu];
            }
        }
        let p = ParticleState {
            d,
            z,
            zdot,
            lambda: t,
            gauge: Gauge::CoordinateTime,
            m,
            eps,
        };
        reparameterize(&p, gauge, metric, eta)
    }

    pub fn dim(&self) -> usize {
        self.d + 1
    }

    /// Physical event `eta^{-1}(z)`.
    pub fn physical(&self, eta: &CovarianceMap) -> Event {
        eta.backward(&self.z)
    }

    /// Physical velocity `d x^mu / d lambda = kappa^mu_a zdot^a`.
    pub fn physical_velocity(&self, eta: &CovarianceMap) -> Result<Event> {
        let x = self.physical(eta);
        let k = eta.inv_jacobian(&x)?;
        let n = self.dim();
        let mut v = [0.0; MAX_DIM];
        for mu in 0..n {
            for a in 0..n {
                v[mu] += k[mu][a] * self.zdot[a];
            }
        }
        Ok(v)
    }

    /// `|zdot|` with the pulled-back metric; gauge error if not timelike.
    pub fn norm(&self, metric: &Metric, eta: &CovarianceMap) -> Result<f64> {
        let g = pullback_metric(metric, eta, &self.z)?;
        timelike_norm(self.dim(), &g, &self.zdot)
    }

    pub fn effective_mass(&self, phi: f64) -> f64 {
        self.m + self.eps * phi
    }
}

fn timelike_norm(n: usize, g: &crate::geometry::Mat, v: &Event) -> Result<f64> {
    let q = quad_form(n, g, v, v);
    if !(q > 0.0) {
        return Err(Error::Gauge(format!(
            "velocity {:?} is not timelike (g(v,v) = {q})",
            &v[..n]
        )));
    }
    Ok(q.sqrt())
}

/// Rescale `zdot` so that `|zdot| = 1` (proper time) or the physical time
/// advances at unit rate (coordinate time). The worldline point is unchanged.
pub fn reparameterize(
    p: &ParticleState,
    target: Gauge,
    metric: &Metric,
    eta: &CovarianceMap,
) -> Result<ParticleState> {
    let norm = p.norm(metric, eta)?;
    let rate = match target {
        Gauge::ProperTime => norm,
        Gauge::CoordinateTime => {
            let v = p.physical_velocity(eta)?;
            if !(v[0] > 0.0) {
                return Err(Error::Gauge("worldline is not future directed".into()));
            }
            v[0]
        }
    };
    let mut q = p.clone();
    for a in 0..p.dim() {
        q.zdot[a] = p.zdot[a] / rate;
    }
    q.gauge = target;
    Ok(q)
}

/// Field value and base-coordinate gradient `d_mu phi` at a physical event.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldSample {
    pub phi: f64,
    pub dphi: Event,
}

/// Anything the particle can sample a field from.
pub trait FieldProvider {
    fn sample(&self, x: &Event) -> Result<FieldSample>;
}

pub struct Vacuum;

impl FieldProvider for Vacuum {
    fn sample(&self, _x: &Event) -> Result<FieldSample> {
        Ok(FieldSample::default())
    }
}

/// `phi(x) = value + gradient . x` over spacetime.
pub struct LinearField {
    pub value: f64,
    pub gradient: Event,
}

impl FieldProvider for LinearField {
    fn sample(&self, x: &Event) -> Result<FieldSample> {
        let phi = self.value + (0..MAX_DIM).map(|i| self.gradient[i] * x[i]).sum::<f64>();
        Ok(FieldSample {
            phi,
            dphi: self.gradient,
        })
    }
}

/// Closure-backed field.
pub struct AnalyticField<F: Fn(&Event) -> FieldSample>(pub F);

impl<F: Fn(&Event) -> FieldSample> FieldProvider for AnalyticField<F> {
    fn sample(&self, x: &Event) -> Result<FieldSample> {
        Ok((self.0)(x))
    }
}

/// Grid snapshot held fixed in time; sampled with the deposition kernel.
pub struct FrozenField<'a> {
    pub grid: &'a GridSpec,
    pub state: &'a FieldState,
    pub kernel: DeltaKernel,
}

impl FieldProvider for FrozenField<'_> {
    fn sample(&self, x: &Event) -> Result<FieldSample> {
        let d = self.grid.d;
        let (phi, grad, _) = interpolate_field(self.grid, self.state, &x[1..=d], &self.kernel)?;
        let mut dphi = [0.0; MAX_DIM];
        dphi[1..=d].copy_from_slice(&grad[..d]);
        Ok(FieldSample { phi, dphi })
    }
}

/// Right-hand side of the momentum equation, a fiber covector.
pub fn particle_force(
    p: &ParticleState,
    sample: &FieldSample,
    metric: &Metric,
    eta: &CovarianceMap,
) -> Result<Event> {
    let n = p.dim();
    let g = pullback_metric(metric, eta, &p.z)?;
    let norm = timelike_norm(n, &g, &p.zdot)?;
    let dg = pullback_metric_derivs(metric, eta, &p.z)?;
    let x = p.physical(eta);
    let kappa = eta.inv_jacobian(&x)?;
    let meff = p.effective_mass(sample.phi);
    let mut f = [0.0; MAX_DIM];
    for a in 0..n {
        let mut coupling = 0.0;
        for mu in 0..n {
            coupling += kappa[mu][a] * sample.dphi[mu];
        }
        let geo = quad_form(n, &dg[a], &p.zdot, &p.zdot);
        f[a] = p.eps * coupling * norm + meff * geo / (2.0 * norm);
    }
    Ok(f)
}

/// Effective momentum `pi_a = (m + eps phi) g_ab zdot^b / |zdot|`.
pub fn momentum(p: &ParticleState, phi: f64, metric: &Metric, eta: &CovarianceMap) -> Result<Event> {
    let n = p.dim();
    let g = pullback_metric(metric, eta, &p.z)?;
    let norm = timelike_norm(n, &g, &p.zdot)?;
    let meff = p.effective_mass(phi);
    let mut pi = [0.0; MAX_DIM];
    for a in 0..n {
        for b in 0..n {
            pi[a] += meff * g[a][b] * p.zdot[b] / norm;
        }
    }
    Ok(pi)
}

/// Recovers `zdot` from a momentum at fiber point `z`. The time component of
/// `pi` is re-solved from the mass shell `g^ab pi_a pi_b = meff^2`; the second
/// value is the relative mass-shell defect before that projection.
pub fn velocity_from_momentum(
    n: usize,
    z: &Event,
    pi: &Event,
    meff: f64,
    gauge: Gauge,
    metric: &Metric,
    eta: &CovarianceMap,
) -> Result<(Event, Event, f64)> {
    if !(meff > 0.0) {
        return Err(Error::Gauge(format!("effective mass {meff} is not positive")));
    }
    let g = pullback_metric(metric, eta, z)?;
    let ginv = mat_inverse(n, &g).ok_or_else(|| Error::SingularMap("fiber metric singular".into()))?;
    let shell = quad_form(n, &ginv, pi, pi);
    let defect = if shell > 0.0 {
        (shell.sqrt() / meff - 1.0).abs()
    } else {
        f64::INFINITY
    };
    let a = ginv[0][0];
    let mut b = 0.0;
    let mut c = -meff * meff;
    for i in 1..n {
        b += 2.0 * ginv[0][i] * pi[i];
        for j in 1..n {
            c += ginv[i][j] * pi[i] * pi[j];
        }
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(Error::Gauge(format!(
            "momentum {:?} cannot be placed on the mass shell",
            &pi[..n]
        )));
    }
    let r1 = (-b + disc.sqrt()) / (2.0 * a);
    let r2 = (-b - disc.sqrt()) / (2.0 * a);
    let mut proj = *pi;
    proj[0] = if (r1 - pi[0]).abs() <= (r2 - pi[0]).abs() { r1 } else { r2 };
    let mut u = [0.0; MAX_DIM];
    for a in 0..n {
        for b in 0..n {
            u[a] += ginv[a][b] * proj[b] / meff;
        }
    }
    let zdot = match gauge {
        Gauge::ProperTime => u,
        Gauge::CoordinateTime => {
            let x = eta.backward(z);
            let k = eta.inv_jacobian(&x)?;
            let rate: f64 = (0..n).map(|a| k[0][a] * u[a]).sum();
            if !(rate > 0.0) {
                return Err(Error::Gauge("worldline is not future directed".into()));
            }
            let mut v = u;
            for c in v.iter_mut().take(n) {
                *c /= rate;
            }
            v
        }
    };
    Ok((zdot, proj, defect))
}

/// Diagnostics from one particle step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepInfo {
    /// Relative mass-shell defect of the kicked momentum before projection.
    pub constraint_defect: f64,
    pub fixed_point_iterations: usize,
}

/// Largest admissible mass-shell defect before projection.
pub const CONSTRAINT_LIMIT: f64 = 1e-4;

/// One position-Verlet step of length `dl` in the particle's own parameter:
/// half drift, implicit midpoint kick of the effective momentum, half drift,
/// then projection onto the mass shell at the new position.
pub fn step_particle(
    p: &ParticleState,
    field: &dyn FieldProvider,
    dl: f64,
    metric: &Metric,
    eta: &CovarianceMap,
) -> Result<(ParticleState, StepInfo)> {
    let n = p.dim();
    let s0 = field.sample(&p.physical(eta))?;
    let pi0 = momentum(p, s0.phi, metric, eta)?;

    let mut zh = p.z;
    for a in 0..n {
        zh[a] += 0.5 * dl * p.zdot[a];
    }
    let xh = eta.backward(&zh);
    let sh = field.sample(&xh)?;
    let meff_h = p.effective_mass(sh.phi);

    let mut mid = p.clone();
    mid.z = zh;
    let mut pi1 = pi0;
    let mut iterations = 0;
    for it in 0..50 {
        iterations = it + 1;
        let mut avg = [0.0; MAX_DIM];
        for a in 0..n {
            avg[a] = 0.5 * (pi0[a] + pi1[a]);
        }
        let (vh, _, _) = velocity_from_momentum(n, &zh, &avg, meff_h, p.gauge, metric, eta)?;
        mid.zdot = vh;
        let f = particle_force(&mid, &sh, metric, eta)?;
        let mut change: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for a in 0..n {
            let new = pi0[a] + dl * f[a];
            change = change.max((new - pi1[a]).abs());
            scale = scale.max(new.abs());
            pi1[a] = new;
        }
        if change <= 1e-15 * scale.max(1e-300) {
            break;
        }
    }

    let (vh1, _, _) = velocity_from_momentum(n, &zh, &pi1, meff_h, p.gauge, metric, eta)?;
    let mut z1 = zh;
    for a in 0..n {
        z1[a] += 0.5 * dl * vh1[a];
    }
    let s1 = field.sample(&eta.backward(&z1))?;
    let meff1 = p.effective_mass(s1.phi);
    let (zdot1, _, defect) = velocity_from_momentum(n, &z1, &pi1, meff1, p.gauge, metric, eta)?;
    if defect > CONSTRAINT_LIMIT {
        return Err(Error::Gauge(format!(
            "mass-shell defect {defect:e} exceeds {CONSTRAINT_LIMIT:e}"
        )));
    }
    let next = ParticleState {
        z: z1,
        zdot: zdot1,
        lambda: p.lambda + dl,
        ..p.clone()
    };
    Ok((
        next,
        StepInfo {
            constraint_defect: defect,
            fixed_point_iterations: iterations,
        },
    ))
}

/// Conserved energy `pi_0` sign-adjusted for static fields in coordinate time:
/// `(m + eps phi) g_0b zdot^b / |zdot|`.
pub fn static_energy(p: &ParticleState, phi: f64, metric: &Metric, eta: &CovarianceMap) -> Result<f64> {
    Ok(momentum(p, phi, metric, eta)?[0])
}

// ---------------------------------------------------------------------------
// Worldline slabs for the coupled discrete action
// ---------------------------------------------------------------------------

/// Fiber event of physical position `x` at time `t`.
pub fn fiber_event(d: usize, eta: &CovarianceMap, t: f64, x: &[f64]) -> Event {
    let mut e = [0.0; MAX_DIM];
    e[0] = t;
    e[1..=d].copy_from_slice(&x[..d]);
    eta.forward(&e)
}

/// Discrete `|zdot|` on the slab between physical positions `xa` at `ta` and
/// `xb` at `tb` (coordinate-time parameter), with gradients with respect to
/// both endpoints. The metric is sampled at the fiber midpoint.
#[derive(Clone, Copy, Debug)]
pub struct SlabNorm {
    pub s: f64,
    pub ds_da: [f64; 3],
    pub ds_db: [f64; 3],
}

pub fn slab_norm(
    d: usize,
    metric: &Metric,
    eta: &CovarianceMap,
    ta: f64,
    xa: &[f64],
    tb: f64,
    xb: &[f64],
) -> Result<SlabNorm> {
    let n = d + 1;
    let dt = tb - ta;
    let mut ea = [0.0; MAX_DIM];
    let mut eb = [0.0; MAX_DIM];
    ea[0] = ta;
    eb[0] = tb;
    ea[1..=d].copy_from_slice(&xa[..d]);
    eb[1..=d].copy_from_slice(&xb[..d]);
    let za = eta.forward(&ea);
    let zb = eta.forward(&eb);
    let mut dz = [0.0; MAX_DIM];
    let mut zm = [0.0; MAX_DIM];
    for a in 0..n {
        dz[a] = zb[a] - za[a];
        zm[a] = 0.5 * (za[a] + zb[a]);
    }
    let g = pullback_metric(metric, eta, &zm)?;
    let q = quad_form(n, &g, &dz, &dz);
    if !(q > 0.0) {
        return Err(Error::Gauge(format!(
            "slab [{ta}, {tb}] is not timelike (g(dz,dz) = {q})"
        )));
    }
    let s = q.sqrt() / dt;
    let trivial = eta.is_identity() && metric.is_minkowski();
    let mut ds_da = [0.0; 3];
    let mut ds_db = [0.0; 3];
    if trivial {
        for i in 0..d {
            let dq = 2.0 * g[i + 1][i + 1] * dz[i + 1];
            ds_db[i] = dq / (2.0 * q.sqrt() * dt);
            ds_da[i] = -ds_db[i];
        }
    } else {
        let dg = pullback_metric_derivs(metric, eta, &zm)?;
        let ja = eta.jacobian(&ea);
        let jb = eta.jacobian(&eb);
        let mut gdz = [0.0; MAX_DIM];
        for a in 0..n {
            for b in 0..n {
                gdz[a] += g[a][b] * dz[b];
            }
        }
        let mut dq_dz = [0.0; MAX_DIM];
        for e in 0..n {
            dq_dz[e] = quad_form(n, &dg[e], &dz, &dz);
        }
        for i in 0..d {
            let mut qa = 0.0;
            let mut qb = 0.0;
            for a in 0..n {
                qb += 2.0 * gdz[a] * jb[a][i + 1] + 0.5 * dq_dz[a] * jb[a][i + 1];
                qa += -2.0 * gdz[a] * ja[a][i + 1] + 0.5 * dq_dz[a] * ja[a][i + 1];
            }
            ds_da[i] = qa / (2.0 * q.sqrt() * dt);
            ds_db[i] = qb / (2.0 * q.sqrt() * dt);
        }
    }
    Ok(SlabNorm { s, ds_da, ds_db })
}
