use std::fs;
use std::path::{Path, PathBuf};

use super::RunRecord;
use crate::cli_io::{serialize_config, write_csv, write_grid, write_manifest, GridFile};
use crate::error::Result;

/// Paths written for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunFiles {
    pub dir: PathBuf,
    pub snapshots: Vec<PathBuf>,
    pub failed: bool,
}

pub fn snapshot_name(step: usize) -> String {
    format!("t_{step:06}.grid")
}

/// Writes the run directory: `config.resolved`, `trajectory.csv`,
/// `snapshots/`, `diagnostics.csv`, `probes.csv`, an `ERROR` marker when the
/// run stopped early, and `MANIFEST` last.
pub fn write_run_record(rec: &RunRecord, dir: &Path) -> Result<RunFiles> {
    let sc = &rec.scenario;
    let d = sc.grid.d;
    fs::create_dir_all(dir.join("snapshots"))?;
    fs::write(dir.join("config.resolved"), serialize_config(sc)?)?;

    if !rec.trajectory.is_empty() {
        let mut header: Vec<String> = vec!["step".into(), "t".into()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.extend((0..d).map(|i| format!("v{i}")));
        header.push("node_norm".into());
        header.push("phi".into());
        let rows: Vec<Vec<f64>> = rec
            .trajectory
            .iter()
            .map(|r| {
                let mut row = vec![r.step as f64, r.t];
                row.extend_from_slice(&r.x[..d]);
                row.extend_from_slice(&r.v[..d]);
                row.push(r.node_norm);
                row.push(r.phi);
                row
            })
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&dir.join("trajectory.csv"), &h, &rows)?;
    }

    if !rec.diagnostics.is_empty() {
        let mut header: Vec<String> = vec!["step".into(), "t".into()];
        header.extend((0..=d).map(|m| format!("P{m}")));
        header.extend(["field_energy".into(), "div_l2".into(), "div_linf".into()]);
        let rows: Vec<Vec<f64>> = rec
            .diagnostics
            .iter()
            .map(|g| {
                let mut row = vec![g.step as f64, g.t];
                row.extend_from_slice(&g.momentum[..=d]);
                row.extend([g.field_energy, g.div_l2, g.div_linf]);
                row
            })
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&dir.join("diagnostics.csv"), &h, &rows)?;
    }

    if !rec.probes.is_empty() {
        let mut header: Vec<String> = vec!["step".into(), "t".into()];
        header.extend((0..rec.probes.len()).map(|p| format!("probe{p}")));
        let rows: Vec<Vec<f64>> = rec
            .times
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let mut row = vec![k as f64, t];
                row.extend(rec.probes.iter().map(|s| s[k]));
                row
            })
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&dir.join("probes.csv"), &h, &rows)?;
    }

    let mut snapshots = Vec::new();
    for s in &rec.snapshots {
        let p = dir.join("snapshots").join(snapshot_name(s.step));
        write_grid(
            &p,
            &GridFile {
                dims: sc.grid.n.clone(),
                extents: sc.grid.extents.clone(),
                time: s.state.t,
                fields: vec![
                    ("phi".into(), s.state.phi.clone()),
                    ("pi_minus".into(), s.state.pi.clone()),
                    ("pi_plus".into(), s.pi_plus.clone()),
                ],
            },
        )?;
        snapshots.push(p);
    }

    let failed = rec.failure.is_some();
    if let Some(f) = &rec.failure {
        fs::write(dir.join("ERROR"), format!("{f}\n"))?;
    }
    write_manifest(dir)?;
    Ok(RunFiles {
        dir: dir.to_path_buf(),
        snapshots,
        failed,
    })
}
