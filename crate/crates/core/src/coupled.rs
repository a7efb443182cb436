//! Field and particle advanced together on one clock.
//!
//! Each step solves the particle's discrete Euler-Lagrange equation at the
//! current node for the next position, with the next field level (which
//! depends on the particle's node norm through the source) updated inside the
//! Newton iteration. The field update is the plain leapfrog step with the
//! source deposited at the current level. Both updates are the stationarity
//! conditions of [`crate::lagrangian::action`] at interior nodes.

use crate::error::{Error, Result};
use crate::geometry::{pullback_metric, CovarianceMap, DeltaKernel, Metric, MAX_DIM};
use crate::kg_field::{deposit_point, FieldState, GridSpec, KgSolver, SourceGrid, Stencil};
use crate::particle::slab_norm;

/// Point particle parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Charge {
    pub m: f64,
    pub eps: f64,
}

#[derive(Clone)]
pub struct CoupledSystem {
    pub solver: KgSolver,
    pub metric: Metric,
    pub eta: CovarianceMap,
    pub kernel: DeltaKernel,
    pub charge: Option<Charge>,
}

/// Particle bookkeeping carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub x: [f64; 3],
    /// `meff_{n-1/2} * ds/dX_b` of the incoming slab (or its continuum
    /// stand-in on the first step).
    incoming: [f64; 3],
    /// Norm of the incoming slab.
    s_prev: f64,
    /// `m + eps * Phi_n(X_n)`.
    f_now: f64,
    /// Half weight on the force impulse for the first step.
    first: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledState {
    pub field: FieldState,
    pub body: Option<Body>,
}

/// What one step produced for the node it left behind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Node norm used for the source at the old level.
    pub node_norm: f64,
    /// Norm of the slab just built.
    pub slab_norm: f64,
    pub newton_iterations: usize,
}

const NEWTON_MAX: usize = 60;

impl CoupledSystem {
    pub fn grid(&self) -> &GridSpec {
        &self.solver.grid
    }

    pub fn dt(&self) -> f64 {
        self.solver.dt
    }

    /// Norm of the continuum velocity `(1, v)` at `(t, x)` and its gradient
    /// with respect to `v`.
    pub fn continuum_norm(&self, t: f64, x: &[f64; 3], v: &[f64; 3]) -> Result<(f64, [f64; 3])> {
        let d = self.grid().d;
        let n = d + 1;
        let mut e = [0.0; MAX_DIM];
        e[0] = t;
        e[1..=d].copy_from_slice(&x[..d]);
        let z = self.eta.forward(&e);
        let g = pullback_metric(&self.metric, &self.eta, &z)?;
        let j = self.eta.jacobian(&e);
        let mut zd = [0.0; MAX_DIM];
        for a in 0..n {
            zd[a] = j[a][0];
            for i in 0..d {
                zd[a] += j[a][i + 1] * v[i];
            }
        }
        let mut gz = [0.0; MAX_DIM];
        for a in 0..n {
            for b in 0..n {
                gz[a] += g[a][b] * zd[b];
            }
        }
        let q: f64 = (0..n).map(|a| gz[a] * zd[a]).sum();
        if !(q > 0.0) {
            return Err(Error::Gauge(format!("initial velocity {:?} is not timelike", &v[..d])));
        }
        let s = q.sqrt();
        let mut ds = [0.0; 3];
        for i in 0..d {
            ds[i] = (0..n).map(|a| gz[a] * j[a][i + 1]).sum::<f64>() / s;
        }
        Ok((s, ds))
    }

    fn source(&self, x: &[f64; 3], strength: f64, t: f64) -> Result<SourceGrid> {
        let mut src = SourceGrid::zeros(self.grid(), t);
        deposit_point(self.grid(), &self.metric, &self.kernel, x, strength, t, &mut src)?;
        Ok(src)
    }

    /// Initial state from `phi(t0)`, `d phi/dt (t0)` and the particle's
    /// physical position and coordinate velocity.
    pub fn init(
        &self,
        phi: Vec<f64>,
        phi_dot: &[f64],
        particle: Option<([f64; 3], [f64; 3])>,
        t0: f64,
    ) -> Result<CoupledState> {
        let mut src = SourceGrid::zeros(self.grid(), t0);
        let body = match (particle, self.charge) {
            (Some((x, v)), Some(c)) => {
                let (s0, ds) = self.continuum_norm(t0, &x, &v)?;
                deposit_point(self.grid(), &self.metric, &self.kernel, &x, c.eps * s0, t0, &mut src)?;
                let st = self.grid().stencil(&self.kernel, &x)?;
                let (phi0, _) = st.sample(&phi);
                let f = c.m + c.eps * phi0;
                let dt = self.dt();
                let mut incoming = [0.0; 3];
                for i in 0..3 {
                    incoming[i] = f * ds[i] / dt;
                }
                Some(Body {
                    x,
                    incoming,
                    s_prev: s0,
                    f_now: f,
                    first: true,
                })
            }
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::config("particle", "particle given without mass and charge"))
            }
        };
        let field = self.solver.initial_state(phi, phi_dot, &src, t0);
        Ok(CoupledState { field, body })
    }

    /// Advances by one step.
    pub fn step(&self, state: &mut CoupledState) -> Result<StepReport> {
        let Some(body) = state.body.clone() else {
            let src = SourceGrid::zeros(self.grid(), state.field.t);
            state.field = self.solver.step(&state.field, &src)?;
            return Ok(StepReport {
                node_norm: 0.0,
                slab_norm: 0.0,
                newton_iterations: 0,
            });
        };
        let c = self.charge.expect("body implies a charge");
        let grid = self.grid();
        let d = grid.d;
        let dt = self.dt();
        let t = state.field.t;
        let field = &state.field;

        // next field level with zero source, plus its response to a unit node norm
        let free = self.solver.step(field, &SourceGrid::zeros(grid, t))?;
        let unit = self.source(&body.x, c.eps, t)?;
        let co = &self.solver.coeffs;
        let mut response = Vec::new();
        let st_now = grid.stencil(&self.kernel, &body.x)?;
        st_now.for_each(|idx, _, _| {
            let r = -dt * dt * co.cm[idx] * unit.rho[idx] / co.ct[idx];
            response.push((idx, r));
        });
        let (_, grad_now) = st_now.sample(&field.phi);
        let kick = if body.first { 0.5 } else { 1.0 };

        let eval = |x: &[f64; 3]| -> Result<([f64; 3], f64, f64)> {
            let sl = slab_norm(d, &self.metric, &self.eta, t, &body.x, t + dt, x)?;
            let s_bar = 0.5 * (body.s_prev + sl.s);
            let st: Stencil = grid.stencil(&self.kernel, x).map_err(|e| match e {
                Error::Boundary(m) => Error::Escape(m),
                other => other,
            })?;
            let (base, _) = st.sample(&free.phi);
            let mut extra = 0.0;
            st.for_each(|idx, w, _| {
                for &(j, r) in &response {
                    if j == idx {
                        extra += w * r;
                    }
                }
            });
            let f_next = c.m + c.eps * (base + s_bar * extra);
            let meff = 0.5 * (body.f_now + f_next);
            let mut r = [0.0; 3];
            for i in 0..d {
                r[i] = kick * c.eps * s_bar * grad_now[i] + body.incoming[i] + meff * sl.ds_da[i];
            }
            Ok((r, s_bar, sl.s))
        };

        // Newton on the d-dimensional residual with a difference Jacobian
        let mut x = [0.0; 3];
        let v_prev = body_velocity_guess(&body, dt, d);
        for i in 0..d {
            x[i] = body.x[i] + dt * v_prev[i];
        }
        let h = 1e-7 * grid.min_spacing();
        let mut iters = 0;
        loop {
            let (r, _, _) = eval(&x)?;
            let mut jac = [[0.0; 3]; 3];
            for k in 0..d {
                let mut xp = x;
                xp[k] += h;
                let mut xm = x;
                xm[k] -= h;
                let (rp, _, _) = eval(&xp)?;
                let (rm, _, _) = eval(&xm)?;
                for i in 0..d {
                    jac[i][k] = (rp[i] - rm[i]) / (2.0 * h);
                }
            }
            let dx = solve_small(d, &jac, &r)
                .ok_or_else(|| Error::NonConvergence("singular particle Jacobian".into()))?;
            let mut step = 0.0f64;
            for i in 0..d {
                x[i] -= dx[i];
                step = step.max(dx[i].abs());
            }
            iters += 1;
            if step <= 1e-15 * (grid.min_spacing() + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                break;
            }
            if iters >= NEWTON_MAX {
                return Err(Error::NonConvergence(format!(
                    "particle update did not converge at t = {t} (last step {step:e})"
                )));
            }
        }
        let (_, s_bar, s_new) = eval(&x)?;

        let src = self.source(&body.x, c.eps * s_bar, t)?;
        let next = self.solver.step(field, &src)?;
        let sl = slab_norm(d, &self.metric, &self.eta, t, &body.x, t + dt, &x)?;
        let st = grid.stencil(&self.kernel, &x)?;
        let (phi_next, _) = st.sample(&next.phi);
        let f_next = c.m + c.eps * phi_next;
        let meff = 0.5 * (body.f_now + f_next);
        let mut incoming = [0.0; 3];
        for i in 0..d {
            incoming[i] = meff * sl.ds_db[i];
        }
        state.field = next;
        state.body = Some(Body {
            x,
            incoming,
            s_prev: s_new,
            f_now: f_next,
            first: false,
        });
        Ok(StepReport {
            node_norm: s_bar,
            slab_norm: s_new,
            newton_iterations: iters,
        })
    }
}

/// Straight-line guess from the incoming momentum (flat-space inversion).
fn body_velocity_guess(body: &Body, dt: f64, d: usize) -> [f64; 3] {
    // incoming = -meff * gamma * v / dt in flat space
    let mut p = [0.0; 3];
    let mut p2 = 0.0;
    for i in 0..d {
        p[i] = -body.incoming[i] * dt / body.f_now.max(f64::MIN_POSITIVE);
        p2 += p[i] * p[i];
    }
    let scale = 1.0 / (1.0 + p2).sqrt();
    let mut v = [0.0; 3];
    for i in 0..d {
        v[i] = p[i] * scale;
    }
    v
}

fn solve_small(d: usize, a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let mut m = *a;
    let mut r = *b;
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col] == 0.0 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in 0..d {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..d {
                    m[row][k] -= f * m[col][k];
                }
                r[row] -= f * r[col];
            }
        }
    }
    let mut x = [0.0; 3];
    for i in 0..d {
        x[i] = r[i] / m[i][i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LambdaMeasure;
    use crate::lagrangian::{variational_residual, ActionSetup, Variation, Worldline};

    fn system(eps: f64) -> CoupledSystem {
        let grid = GridSpec::periodic_cube(1, 8.0, 64);
        let dt = 0.5 * grid.spacing(0);
        CoupledSystem {
            solver: KgSolver::new(&grid, &Metric::minkowski(1), 1.0, dt).unwrap(),
            metric: Metric::minkowski(1),
            eta: CovarianceMap::identity(1),
            kernel: DeltaKernel::default(),
            charge: Some(Charge { m: 1.0, eps }),
        }
    }

    fn run(sys: &CoupledSystem, steps: usize, v: f64) -> (Vec<FieldState>, Worldline) {
        let g = sys.grid().clone();
        let phi: Vec<f64> = (0..g.len()).map(|i| 0.1 * (g.node_coord(0, i) * 0.785).sin()).collect();
        let mut st = sys.init(phi, &vec![0.0; g.len()], Some(([0.3, 0.0, 0.0], [v, 0.0, 0.0])), 0.0).unwrap();
        let mut fields = vec![st.field.clone()];
        let mut xs = vec![st.body.as_ref().unwrap().x];
        for _ in 0..steps {
            sys.step(&mut st).unwrap();
            fields.push(st.field.clone());
            xs.push(st.body.as_ref().unwrap().x);
        }
        let c = sys.charge.unwrap();
        let wl = Worldline {
            d: 1,
            t: fields.iter().map(|f| f.t).collect(),
            x: xs,
            m: c.m,
            eps: c.eps,
        };
        (fields, wl)
    }

    #[test]
    fn free_particle_moves_straight() {
        let sys = system(0.0);
        let (_, wl) = run(&sys, 40, 0.6);
        for k in 0..wl.len() {
            let want = 0.3 + 0.6 * wl.t[k];
            assert!((wl.x[k][0] - want).abs() < 1e-12, "{k}: {} vs {want}", wl.x[k][0]);
        }
    }

    #[test]
    fn coupled_history_is_stationary() {
        let sys = system(0.5);
        let steps = 30;
        let (fields, wl) = run(&sys, steps, 0.3);
        let setup = ActionSetup {
            grid: sys.grid().clone(),
            metric: sys.metric.clone(),
            eta: sys.eta.clone(),
            kernel: sys.kernel,
            mass: 1.0,
            suspension: LambdaMeasure::uniform(0.0, fields[steps].t),
        };
        let mut worst: f64 = 0.0;
        for level in 1..steps {
            let r = variational_residual(&setup, &fields, Some(&wl), Variation::ParticleNode { level, axis: 0 }, 1.0)
                .unwrap();
            worst = worst.max(r.relative());
            for node in (0..64).step_by(5) {
                let r = variational_residual(&setup, &fields, Some(&wl), Variation::FieldNode { level, node }, 1.0)
                    .unwrap();
                worst = worst.max(r.relative());
            }
        }
        assert!(worst < 1e-6, "worst relative residual {worst:e}");
    }
}
