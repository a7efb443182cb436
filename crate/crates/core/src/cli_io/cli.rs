use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{parse_config, read_csv, read_grid, write_csv, write_manifest};
use crate::error::{Error, Result};
use crate::kg_field::FieldState;
use crate::sem::{conservation_audit, sem_divergence, SemGrid, WorldlinePoint};
use crate::simulate::{
    builtin, dispersion_study, eta_invariance_test, level_sem, plane_wave_convergence, run,
    variational_audit, write_run_record, yukawa_check, EtaSpec, RunOptions, Scenario,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_AUDIT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mesic", version, about = "Klein-Gordon field coupled to a mesically charged particle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Source {
    /// Configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin scenario name, used when no config file is given.
    #[arg(long)]
    scenario: Option<String>,
    /// Worker threads for grid kernels (overrides the config).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write its record directory.
    Run {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit SEM divergence and conservation of a finished run.
    AuditSem {
        #[arg(long)]
        run: PathBuf,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tolerance_override: Option<f64>,
    },
    /// Finite-difference variations of the discrete action along a run.
    DeriveCheck {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tolerance_override: Option<f64>,
        /// Vary every n-th field node.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Measured dispersion relation and spatial convergence order.
    Dispersion {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tolerance_override: Option<f64>,
    },
    /// Static field of a pinned particle against the Yukawa profile.
    Yukawa {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tolerance_override: Option<f64>,
    },
    /// Physical outputs under different covariance fields.
    EtaCheck {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tolerance_override: Option<f64>,
    },
}

fn load(src: &Source, default: &str) -> Result<Scenario> {
    let mut sc = match (&src.config, &src.scenario) {
        (Some(p), _) => parse_config(p)?,
        (None, Some(name)) => builtin(name)?,
        (None, None) => builtin(default)?,
    };
    if let Some(t) = src.threads {
        sc.threads = t;
    }
    sc.validate()?;
    Ok(sc)
}

fn prepare(out: &Option<PathBuf>) -> Result<()> {
    if let Some(o) = out {
        fs::create_dir_all(o)?;
    }
    Ok(())
}

fn verdict(name: &str, ok: bool) -> i32 {
    println!("{name}: {}", if ok { "PASS" } else { "FAIL" });
    if ok {
        EXIT_OK
    } else {
        EXIT_AUDIT
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse { .. }
                | Error::Config { .. }
                | Error::Io(_)
                | Error::Format { .. }
                | Error::Unsupported(_)
                | Error::Normalization(_)
                | Error::Audit(_) => EXIT_USAGE,
                _ => EXIT_AUDIT,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run { src, out } => {
            let sc = load(&src, "coupled-1d")?;
            let rec = run(&sc, RunOptions { keep_history: false, sem: true })?;
            let files = write_run_record(&rec, &out)?;
            if let Some(f) = &rec.failure {
                eprintln!("run stopped early: {f}");
                return Ok(EXIT_AUDIT);
            }
            println!("wrote {} ({} snapshots)", files.dir.display(), files.snapshots.len());
            Ok(EXIT_OK)
        }
        Command::AuditSem { run, out, tolerance_override } => audit_sem(&run, out.as_deref(), tolerance_override),
        Command::DeriveCheck { src, out, tolerance_override, stride } => {
            let sc = load(&src, "coupled-1d")?;
            prepare(&out)?;
            let tol = tolerance_override.unwrap_or(sc.tolerances.variational);
            let rec = run(&sc, RunOptions { keep_history: true, sem: false })?;
            if let Some(f) = &rec.failure {
                return Err(Error::Divergence(f.clone()));
            }
            let rows = variational_audit(&rec, stride)?;
            let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.relative));
            let table: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.level as f64,
                        r.particle_axis.map_or(0.0, |_| 1.0),
                        r.index as f64,
                        r.derivative,
                        r.scale,
                        r.relative,
                    ]
                })
                .collect();
            let header = ["level", "particle", "index", "derivative", "scale", "relative"];
            match &out {
                Some(o) => write_csv(&o.join("variational_residuals.csv"), &header, &table)?,
                None => {
                    println!("{}", header.join(","));
                    for r in &table {
                        let cells: Vec<String> = r.iter().map(|&x| crate::util::fmt17(x)).collect();
                        println!("{}", cells.join(","));
                    }
                }
            }
            eprintln!("{} variations, worst relative residual {worst:e} (tolerance {tol:e})", rows.len());
            Ok(verdict("derive-check", worst <= tol))
        }
        Command::Dispersion { src, out, tolerance_override } => {
            let sc = load(&src, "dispersion")?;
            prepare(&out)?;
            let tol = tolerance_override.unwrap_or(0.01);
            let modes: Vec<(i64, f64)> = [0.0, 1.0]
                .iter()
                .flat_map(|&m| [1, 2, 4].map(|k| (k, m)))
                .collect();
            let res = dispersion_study(&sc, &modes)?;
            let (hs, errs, order) =
                plane_wave_convergence(&[32, 64, 128, 256], sc.grid.extents[0], 1, 1.0, 1.0)?;
            let mut ok = (1.8..=2.2).contains(&order);
            let mut rows = Vec::new();
            for m in &res {
                println!(
                    "k = {:.6} M = {} omega = {:.9} expected {:.9} rel.err {:.3e}",
                    m.k, m.mass, m.omega_measured, m.omega_exact, m.rel_error
                );
                ok &= m.rel_error < tol;
                rows.push(vec![m.k, m.mass, m.omega_measured, m.omega_exact, m.rel_error]);
            }
            println!("spatial convergence order {order:.4}");
            if let Some(o) = &out {
                write_csv(&o.join("dispersion.csv"), &["k", "mass", "omega", "omega_exact", "rel_error"], &rows)?;
                let conv: Vec<Vec<f64>> = hs.iter().zip(&errs).map(|(h, e)| vec![*h, *e]).collect();
                write_csv(&o.join("convergence.csv"), &["h", "l2_error"], &conv)?;
            }
            Ok(verdict("dispersion", ok))
        }
        Command::Yukawa { src, out, tolerance_override } => {
            let sc = load(&src, "yukawa-1d")?;
            prepare(&out)?;
            let tol = tolerance_override.unwrap_or(if sc.grid.d == 1 { 0.01 } else { 0.05 });
            let (state, check) = yukawa_check(&sc)?;
            println!(
                "max relative deviation {:.4e} over {} nodes with {:.4} <= r <= {:.4}",
                check.max_rel_error, check.samples, check.r_min, check.r_max
            );
            if let Some(o) = &out {
                let rows: Vec<Vec<f64>> = (0..sc.grid.len())
                    .map(|i| {
                        let m = sc.grid.multi_index(i);
                        let mut r: Vec<f64> = (0..sc.grid.d).map(|a| sc.grid.node_coord(a, m[a])).collect();
                        r.push(state.phi[i]);
                        r
                    })
                    .collect();
                let mut header: Vec<String> = (0..sc.grid.d).map(|a| format!("x{a}")).collect();
                header.push("phi".into());
                let h: Vec<&str> = header.iter().map(String::as_str).collect();
                write_csv(&o.join("profile.csv"), &h, &rows)?;
            }
            Ok(verdict("yukawa", check.max_rel_error < tol && check.samples > 0))
        }
        Command::EtaCheck { src, out, tolerance_override } => {
            let sc = load(&src, "coupled-1d")?;
            prepare(&out)?;
            let tol = tolerance_override.unwrap_or(1e-6);
            let (affine, smooth) = eta_pair(&sc);
            let id = EtaSpec::Identity;
            let a = eta_invariance_test(&sc, &id, &affine)?;
            let s = eta_invariance_test(&sc, &id, &smooth)?;
            println!("affine: trajectory {:.3e}, action {:.3e}", a.trajectory, a.action);
            println!("smooth: trajectory {:.3e}, action {:.3e}", s.trajectory, s.action);
            if let Some(o) = &out {
                write_csv(
                    &o.join("eta_check.csv"),
                    &["map", "trajectory", "action"],
                    &[vec![1.0, a.trajectory, a.action], vec![2.0, s.trajectory, s.action]],
                )?;
            }
            let ok = a.trajectory <= tol && a.action <= tol && s.trajectory < 0.01 && s.action < 0.01;
            Ok(verdict("eta-check", ok))
        }
    }
}

/// Affine map with unit time row and spatial determinant 2, and a smooth
/// spatial warp commensurate with the box.
pub fn eta_pair(sc: &Scenario) -> (EtaSpec, EtaSpec) {
    let d = sc.grid.d;
    let n = d + 1;
    let mut matrix = vec![vec![0.0; n]; n];
    matrix[0][0] = 1.0;
    for i in 1..n {
        matrix[i][i] = 1.0;
        matrix[i][0] = 0.5;
    }
    matrix[1][1] = 2.0;
    let affine = EtaSpec::Affine { matrix, offset: vec![0.0; n] };
    let smooth = EtaSpec::Sinusoidal {
        amplitude: vec![0.3; d],
        period: sc.grid.extents.iter().map(|l| 0.5 * l).collect(),
    };
    (affine, smooth)
}

/// Recomputes SEM diagnostics from a run directory.
fn audit_sem(dir: &Path, out: Option<&Path>, tol: Option<f64>) -> Result<i32> {
    let sc = parse_config(&dir.join("config.resolved"))?;
    let tol = tol.unwrap_or(sc.tolerances.momentum_drift);
    let out = out.unwrap_or(dir);
    fs::create_dir_all(out)?;
    let sys = sc.system()?;
    let d = sc.grid.d;

    let mut steps: BTreeMap<usize, PathBuf> = BTreeMap::new();
    for e in fs::read_dir(dir.join("snapshots"))? {
        let p = e?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        if let Some(k) = name.strip_prefix("t_").and_then(|r| r.strip_suffix(".grid")) {
            if let Ok(k) = k.parse::<usize>() {
                steps.insert(k, p);
            }
        }
    }
    if steps.is_empty() {
        return Err(Error::Audit(format!("no snapshots under {}", dir.join("snapshots").display())));
    }
    let traj = if dir.join("trajectory.csv").exists() {
        let t = read_csv(&dir.join("trajectory.csv"))?;
        let col = |n: &str| {
            t.column(n).ok_or_else(|| Error::Format {
                path: "trajectory.csv".into(),
                message: format!("missing column {n}"),
            })
        };
        let step = col("step")?;
        let xs: Vec<Vec<f64>> = (0..d).map(|i| col(&format!("x{i}"))).collect::<Result<_>>()?;
        let vs: Vec<Vec<f64>> = (0..d).map(|i| col(&format!("v{i}"))).collect::<Result<_>>()?;
        let norm = col("node_norm")?;
        let mut map = BTreeMap::new();
        for (r, s) in step.iter().enumerate() {
            let mut x = [0.0; 3];
            let mut v = [0.0; 3];
            for i in 0..d {
                x[i] = xs[i][r];
                v[i] = vs[i][r];
            }
            map.insert(*s as usize, WorldlinePoint { x, v, norm: norm[r] });
        }
        Some(map)
    } else {
        None
    };

    let mut sems: Vec<(usize, SemGrid)> = Vec::new();
    for (&k, p) in &steps {
        let g = read_grid(p)?;
        let field = |n: &str| {
            g.field(n).map(<[f64]>::to_vec).ok_or_else(|| Error::Format {
                path: p.display().to_string(),
                message: format!("missing field {n}"),
            })
        };
        let state = FieldState { phi: field("phi")?, pi: field("pi_minus")?, t: g.time };
        let pi_plus = field("pi_plus")?;
        let point = match &traj {
            Some(m) => Some(*m.get(&k).ok_or_else(|| Error::Audit(format!("trajectory lacks step {k}")))?),
            None => None,
        };
        sems.push((k, level_sem(&sys, &sc, &state, &pi_plus, point.as_ref())?));
    }

    let mut div_rows = Vec::new();
    for w in sems.windows(3) {
        if w[1].0 == w[0].0 + 1 && w[2].0 == w[1].0 + 1 {
            let snaps = [w[0].1.clone(), w[1].1.clone(), w[2].1.clone()];
            let dv = sem_divergence(&sc.grid, &snaps)?;
            div_rows.push(vec![dv.t, dv.l2, dv.linf]);
        }
    }
    write_csv(&out.join("sem_divergence.csv"), &["t", "l2", "linf"], &div_rows)?;

    let grids: Vec<SemGrid> = sems.into_iter().map(|(_, s)| s).collect();
    let report = conservation_audit(&sc.grid, &grids)?;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..=d).map(|m| format!("P{m}")));
    let rows: Vec<Vec<f64>> = report
        .times
        .iter()
        .zip(&report.momentum)
        .map(|(t, p)| {
            let mut r = vec![*t];
            r.extend_from_slice(&p[..=d]);
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("conservation.csv"), &h, &rows)?;
    if out != dir {
        write_manifest(out)?;
    }
    let worst_div = div_rows.iter().fold(0.0f64, |m, r| m.max(r[1]));
    println!(
        "momentum drift {:.3e} (tolerance {tol:.1e}); worst normalized divergence {worst_div:.3e} over {} levels",
        report.max_drift,
        div_rows.len()
    );
    Ok(verdict("audit-sem", report.max_drift <= tol))
}
