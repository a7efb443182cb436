//! Grid snapshots, CSV tables and checksum manifests.
//!
//! Grid files carry a short text header followed by raw little-endian `f64`
//! values, one block per field in header order:
//!
//! ```text
//! mesic-grid 1
//! dims 256
//! extents 2.0000000000000000e1
//! time 0.0000000000000000e0
//! fields phi pi_minus pi_plus
//! data
//! <binary>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::util::fmt17;

const MAGIC: &str = "mesic-grid 1";

#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub dims: Vec<usize>,
    pub extents: Vec<f64>,
    pub time: f64,
    pub fields: Vec<(String, Vec<f64>)>,
}

impl GridFile {
    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

pub fn write_grid(path: &Path, g: &GridFile) -> Result<()> {
    let len: usize = g.dims.iter().product();
    let mut buf = Vec::with_capacity(256 + 8 * len * g.fields.len());
    let join = |v: Vec<String>| v.join(" ");
    writeln!(buf, "{MAGIC}")?;
    writeln!(buf, "dims {}", join(g.dims.iter().map(|d| d.to_string()).collect()))?;
    writeln!(buf, "extents {}", join(g.extents.iter().map(|&e| fmt17(e)).collect()))?;
    writeln!(buf, "time {}", fmt17(g.time))?;
    writeln!(buf, "fields {}", join(g.fields.iter().map(|(n, _)| n.clone()).collect()))?;
    writeln!(buf, "data")?;
    for (name, v) in &g.fields {
        if v.len() != len {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("field {name} has {} values, grid has {len}", v.len()),
            });
        }
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let mut pos = 0;
    let mut header = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("header not terminated by a `data` line"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8"))?;
        pos += end + 1;
        if line == "data" {
            break;
        }
        header.push(line.to_string());
        if header.len() > 16 {
            return Err(bad("header too long"));
        }
    }
    if header.first().map(String::as_str) != Some(MAGIC) {
        return Err(bad("missing magic line"));
    }
    let value = |key: &str| -> Result<Vec<String>> {
        header
            .iter()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
            .map(|r| r.split_whitespace().map(str::to_string).collect())
            .ok_or_else(|| bad(&format!("missing `{key}` line")))
    };
    let dims: Vec<usize> = value("dims")?
        .iter()
        .map(|s| s.parse().map_err(|_| bad("bad dims")))
        .collect::<Result<_>>()?;
    let extents: Vec<f64> = value("extents")?
        .iter()
        .map(|s| s.parse().map_err(|_| bad("bad extents")))
        .collect::<Result<_>>()?;
    let time: f64 = value("time")?
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad time"))?;
    let names = value("fields")?;
    let len: usize = dims.iter().product();
    if bytes.len() - pos != 8 * len * names.len() {
        return Err(bad(&format!(
            "payload has {} bytes, header implies {}",
            bytes.len() - pos,
            8 * len * names.len()
        )));
    }
    let mut fields = Vec::with_capacity(names.len());
    for name in names {
        let v: Vec<f64> = bytes[pos..pos + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += 8 * len;
        fields.push((name, v));
    }
    Ok(GridFile {
        dims,
        extents,
        time,
        fields,
    })
}

/// Header plus numeric rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// Writes a numeric table with 17 significant digits per value.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|&x| fmt17(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path)?;
    let bad = |m: String| Error::Format {
        path: path.display().to_string(),
        message: m,
    };
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let r: Vec<f64> = l
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
        if r.len() != header.len() {
            return Err(bad(format!("row {} has {} cells, header has {}", i + 2, r.len(), header.len())));
        }
        rows.push(r);
    }
    Ok(CsvTable { header, rows })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `MANIFEST` in `dir` with one `sha256  relative/path` line per file,
/// sorted by path.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "MANIFEST") {
                let rel = p.strip_prefix(dir).expect("inside dir").to_string_lossy().replace('\\', "/");
                entries.push((rel, sha256_hex(&fs::read(&p)?)));
            }
        }
    }
    entries.sort();
    let text: String = entries.iter().map(|(p, h)| format!("{h}  {p}\n")).collect();
    fs::write(dir.join("MANIFEST"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.grid");
        let g = GridFile {
            dims: vec![3, 2],
            extents: vec![1.5, 0.1],
            time: 0.1 + 0.2,
            fields: vec![
                ("phi".into(), vec![1.0, -2.0, 3.5, 1e-300, f64::MAX, 0.1]),
                ("pi".into(), vec![0.0; 6]),
            ],
        };
        write_grid(&p, &g).unwrap();
        assert_eq!(read_grid(&p).unwrap(), g);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_grid(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![vec![0.1, 1.0 / 3.0], vec![-2.5e-17, 6.02e23]];
        write_csv(&p, &["a", "b"], &rows).unwrap();
        let t = read_csv(&p).unwrap();
        assert_eq!(t.rows, rows);
        assert_eq!(t.column("b").unwrap(), vec![1.0 / 3.0, 6.02e23]);
    }

    #[test]
    fn manifest_lists_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/x"), b"abc").unwrap();
        write_manifest(dir.path()).unwrap();
        let m = fs::read_to_string(dir.path().join("MANIFEST")).unwrap();
        assert_eq!(
            m,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad  sub/x\n"
        );
    }
}
