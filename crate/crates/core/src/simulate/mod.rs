//! Scenario definitions and orchestration.

mod record;
mod run;
mod studies;

pub use record::{snapshot_name, write_run_record, RunFiles};
pub use run::{
    level_sem, run, variational_audit, Diagnostic, ResidualRow, RunOptions, RunRecord, Snapshot,
    TrajectoryRow,
};
pub use studies::{
    dispersion_study, eta_invariance_test, plane_wave_convergence, solve_static_yukawa,
    time_reversal_probe, yukawa_check, yukawa_profile_error, DispersionMode, EtaReport, YukawaCheck,
};

use serde::{Deserialize, Serialize};

use crate::coupled::{Charge, CoupledSystem};
use crate::error::{Error, Result};
use crate::geometry::{
    identity_mat, CovarianceMap, DeltaKernel, LambdaMeasure, Metric, StaticProfile, MAX_DIM,
};
use crate::kg_field::{GridSpec, KgSolver};
use crate::particle::Gauge;

/// Field and particle constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    /// Klein-Gordon mass `M`.
    pub field_mass: f64,
    /// Particle rest mass `m`.
    #[serde(default)]
    pub particle_mass: f64,
    /// Mesic charge.
    #[serde(default)]
    pub eps: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    #[default]
    Minkowski,
    StaticDiagonal { amplitude: f64, center: Vec<f64>, width: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaSpec {
    #[default]
    Identity,
    /// `z = A x + b` on spacetime events (rows/columns in `t, x, y, z` order).
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// Spatial sinusoidal warp with per-axis relative amplitude and period.
    Sinusoidal { amplitude: Vec<f64>, period: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldInit {
    /// `A cos(k x)` with `k = 2 pi mode / L` along the first axis; a traveling
    /// wave also gets the matching time derivative.
    PlaneWave {
        mode: i64,
        amplitude: f64,
        #[serde(default)]
        traveling: bool,
    },
    /// Gaussian bump translated along the first axis at `velocity`.
    Gaussian {
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
        #[serde(default)]
        velocity: f64,
    },
    /// Static self-field of the particle at its initial position.
    Yukawa,
    /// `count` static Gaussian bumps with seeded random centers and signs.
    RandomPulses { count: usize, amplitude: f64, width: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleInit {
    pub position: Vec<f64>,
    #[serde(default)]
    pub velocity: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Initial {
    #[serde(default)]
    pub field: Vec<FieldInit>,
    #[serde(default)]
    pub particle: Option<ParticleInit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// Steps between diagnostic rows.
    #[serde(default = "one")]
    pub cadence: usize,
    /// Steps between grid snapshots (0 disables snapshots).
    #[serde(default)]
    pub snapshot_every: usize,
    /// Physical probe locations sampled every step.
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            cadence: 1,
            snapshot_every: 0,
            probes: Vec::new(),
        }
    }
}

/// Audit thresholds used by the command-line checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_drift")]
    pub momentum_drift: f64,
    #[serde(default = "default_variational")]
    pub variational: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            momentum_drift: default_drift(),
            variational: default_variational(),
        }
    }
}

fn one() -> usize {
    1
}
fn default_drift() -> f64 {
    5e-3
}
fn default_variational() -> f64 {
    1e-6
}
fn default_gauge() -> Gauge {
    Gauge::CoordinateTime
}

/// A complete, reproducible run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
    pub physics: Physics,
    pub grid: GridSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub eta: EtaSpec,
    #[serde(default)]
    pub kernel: DeltaKernel,
    #[serde(default = "default_gauge")]
    pub gauge: Gauge,
    pub duration: f64,
    pub dt: f64,
    #[serde(default)]
    pub initial: Initial,
    #[serde(default)]
    pub outputs: Outputs,
    /// Suspension density; defaults to uniform over the run window.
    #[serde(default)]
    pub suspension: Option<LambdaMeasure>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 6] = [
    "free-field-1d",
    "free-particle",
    "coupled-1d",
    "dispersion",
    "yukawa-1d",
    "yukawa-3d",
];

fn base(name: &str, grid: GridSpec, physics: Physics, duration: f64, dt: f64) -> Scenario {
    Scenario {
        name: name.to_string(),
        seed: 0,
        threads: 1,
        physics,
        grid,
        metric: MetricSpec::Minkowski,
        eta: EtaSpec::Identity,
        kernel: DeltaKernel::default(),
        gauge: Gauge::CoordinateTime,
        duration,
        dt,
        initial: Initial::default(),
        outputs: Outputs::default(),
        suspension: None,
        tolerances: Tolerances::default(),
    }
}

/// Named scenario with all defaults filled in.
pub fn builtin(name: &str) -> Result<Scenario> {
    let sc = match name {
        "free-field-1d" => {
            // h = 10/256, dt = h/2, 10^4 steps
            let mut s = base(
                name,
                GridSpec::periodic_cube(1, 10.0, 256),
                Physics { field_mass: 1.0, particle_mass: 0.0, eps: 0.0 },
                195.3125,
                0.01953125,
            );
            s.initial.field = vec![FieldInit::Gaussian {
                amplitude: 1.0,
                center: vec![0.0],
                width: 0.5,
                velocity: 1.0,
            }];
            s.outputs = Outputs { cadence: 100, snapshot_every: 1000, probes: vec![vec![0.0]] };
            s.tolerances.momentum_drift = 1e-6;
            s
        }
        "free-particle" => {
            let mut s = base(
                name,
                GridSpec::periodic_cube(1, 20.0, 128),
                Physics { field_mass: 1.0, particle_mass: 1.0, eps: 0.0 },
                10.0,
                0.078125,
            );
            s.initial.particle = Some(ParticleInit { position: vec![0.0], velocity: vec![0.6] });
            s.outputs = Outputs { cadence: 1, snapshot_every: 16, probes: vec![] };
            s.tolerances.momentum_drift = 1e-10;
            s
        }
        "coupled-1d" => {
            let mut s = base(
                name,
                GridSpec::periodic_cube(1, 20.0, 256),
                Physics { field_mass: 1.0, particle_mass: 1.0, eps: 0.5 },
                10.0,
                0.0390625,
            );
            s.initial.particle = Some(ParticleInit { position: vec![0.0], velocity: vec![0.3] });
            s.initial.field = vec![
                FieldInit::Yukawa,
                FieldInit::Gaussian { amplitude: 0.2, center: vec![-5.0], width: 1.0, velocity: 1.0 },
            ];
            s.outputs = Outputs { cadence: 1, snapshot_every: 1, probes: vec![vec![5.0]] };
            s
        }
        "dispersion" => {
            let l = std::f64::consts::TAU;
            let mut s = base(
                name,
                GridSpec::periodic_cube(1, l, 512),
                Physics { field_mass: 1.0, particle_mass: 0.0, eps: 0.0 },
                0.0,
                0.5 * l / 512.0,
            );
            let steps = (400.0 / s.dt).round();
            s.duration = steps * s.dt;
            s.initial.field = vec![FieldInit::PlaneWave { mode: 1, amplitude: 1.0, traveling: false }];
            s.outputs = Outputs { cadence: 1000, snapshot_every: 0, probes: vec![vec![s.grid.node_coord(0, 0)]] };
            s
        }
        "yukawa-1d" => {
            let mut s = base(
                name,
                GridSpec::periodic_cube(1, 40.0, 512),
                Physics { field_mass: 1.0, particle_mass: 1.0, eps: 1.0 },
                0.0,
                0.0390625,
            );
            s.initial.particle = Some(ParticleInit { position: vec![0.0], velocity: vec![0.0] });
            s
        }
        "yukawa-3d" => {
            let mut s = base(
                name,
                GridSpec::periodic_cube(3, 16.0, 64),
                Physics { field_mass: 1.0, particle_mass: 1.0, eps: 1.0 },
                0.0,
                0.125,
            );
            s.initial.particle = Some(ParticleInit { position: vec![0.0; 3], velocity: vec![0.0; 3] });
            s
        }
        other => {
            return Err(Error::config(
                "name",
                format!("unknown builtin scenario '{other}' (known: {})", BUILTINS.join(", ")),
            ))
        }
    };
    Ok(sc)
}

impl Scenario {
    pub fn metric(&self) -> Result<Metric> {
        let d = self.grid.d;
        Ok(match &self.metric {
            MetricSpec::Minkowski => Metric::minkowski(d),
            MetricSpec::StaticDiagonal { amplitude, center, width } => {
                if center.len() != d {
                    return Err(Error::config("metric.center", format!("needs {d} entries")));
                }
                let mut c = [0.0; 3];
                c[..d].copy_from_slice(center);
                if !(amplitude.abs() < 0.5) || !(*width > 0.0) {
                    return Err(Error::config(
                        "metric",
                        "static profile needs |amplitude| < 0.5 and width > 0",
                    ));
                }
                Metric::static_diagonal(d, StaticProfile { amplitude: *amplitude, center: c, width: *width })
            }
        })
    }

    pub fn eta(&self) -> Result<CovarianceMap> {
        let d = self.grid.d;
        let n = d + 1;
        match &self.eta {
            EtaSpec::Identity => Ok(CovarianceMap::identity(d)),
            EtaSpec::Affine { matrix, offset } => {
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) || offset.len() != n {
                    return Err(Error::config("eta", format!("affine map needs a {n}x{n} matrix and {n} offsets")));
                }
                let mut a = identity_mat(n);
                let mut b = [0.0; MAX_DIM];
                for i in 0..n {
                    a[i][..n].copy_from_slice(&matrix[i]);
                    b[i] = offset[i];
                }
                CovarianceMap::affine(d, a, b)
            }
            EtaSpec::Sinusoidal { amplitude, period } => {
                if amplitude.len() != d || period.len() != d {
                    return Err(Error::config("eta", format!("sinusoidal map needs {d} amplitudes and periods")));
                }
                let mut am = [0.0; 3];
                let mut pe = [1.0; 3];
                am[..d].copy_from_slice(amplitude);
                pe[..d].copy_from_slice(period);
                CovarianceMap::sinusoidal(d, am, pe)
            }
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    /// Suspension density over the run window.
    pub fn suspension(&self) -> LambdaMeasure {
        self.suspension.unwrap_or_else(|| LambdaMeasure::uniform(0.0, self.steps().max(1) as f64 * self.dt))
    }

    fn particle_xv(&self) -> Result<Option<([f64; 3], [f64; 3])>> {
        let d = self.grid.d;
        let Some(p) = &self.initial.particle else { return Ok(None) };
        if p.position.len() != d {
            return Err(Error::config("initial.particle.position", format!("needs {d} entries")));
        }
        let mut x = [0.0; 3];
        x[..d].copy_from_slice(&p.position);
        let mut v = [0.0; 3];
        if !p.velocity.is_empty() {
            if p.velocity.len() != d {
                return Err(Error::config("initial.particle.velocity", format!("needs {d} entries")));
            }
            v[..d].copy_from_slice(&p.velocity);
        }
        Ok(Some((x, v)))
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let metric = self.metric()?;
        self.eta()?;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("dt", "must be positive and finite"));
        }
        if !(self.duration >= 0.0) {
            return Err(Error::config("duration", "must be non-negative"));
        }
        let ratio = self.duration / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::config("duration", format!("must be a whole number of steps (duration/dt = {ratio})")));
        }
        if self.threads == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        if !(self.kernel.width > 0.0) {
            return Err(Error::config("kernel.width", "must be positive"));
        }
        if self.outputs.cadence == 0 {
            return Err(Error::config("outputs.cadence", "must be at least 1"));
        }
        if self.physics.field_mass < 0.0 || self.physics.particle_mass < 0.0 {
            return Err(Error::config("physics", "masses must be non-negative"));
        }
        KgSolver::new(&self.grid, &metric, self.physics.field_mass, self.dt).map_err(|e| match e {
            Error::Stability(m) => Error::config("dt", format!("CFL violation: {m}")),
            other => other,
        })?;
        self.suspension().validate()?;
        for (i, p) in self.outputs.probes.iter().enumerate() {
            if p.len() != self.grid.d || !self.grid.contains(p) {
                return Err(Error::config(format!("outputs.probes[{i}]"), "probe outside the grid"));
            }
        }
        if let Some((x, _)) = self.particle_xv()? {
            if !self.grid.contains(&x) {
                return Err(Error::config("initial.particle.position", "outside the grid"));
            }
            if self.gauge == Gauge::ProperTime {
                return Err(Error::Unsupported(
                    "coupled runs step on the field clock; use gauge = \"coordinate_time\"".into(),
                ));
            }
        }
        if self.initial.field.contains(&FieldInit::Yukawa) && self.initial.particle.is_none() {
            return Err(Error::config("initial.field", "a Yukawa field needs a particle"));
        }
        Ok(())
    }

    /// Assembles the coupled stepper.
    pub fn system(&self) -> Result<CoupledSystem> {
        let metric = self.metric()?;
        let solver = KgSolver::new(&self.grid, &metric, self.physics.field_mass, self.dt)?.with_threads(self.threads)?;
        let charge = self.initial.particle.as_ref().map(|_| Charge {
            m: self.physics.particle_mass,
            eps: self.physics.eps,
        });
        Ok(CoupledSystem {
            solver,
            metric,
            eta: self.eta()?,
            kernel: self.kernel,
            charge,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in BUILTINS {
            let s = builtin(name).unwrap();
            s.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(matches!(builtin("nope"), Err(Error::Config { .. })));
    }

    #[test]
    fn cfl_violation_names_dt() {
        let mut s = builtin("coupled-1d").unwrap();
        s.dt = 0.2;
        s.duration = 2.0;
        match s.validate() {
            Err(Error::Config { key, message }) => {
                assert_eq!(key, "dt");
                assert!(message.contains("CFL"));
            }
            other => panic!("{other:?}"),
        }
    }
}
