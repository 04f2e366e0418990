//! File formats shared with the plotting scripts: energy, study and norm-report CSVs,
//! plain-text field snapshots, and the per-invocation manifest.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a file back
//! reproduces the values exactly and identical runs give identical bytes.

use crate::error::{Error, Result};
use crate::field_grid::{Grid2, ScalarField};
use crate::fsi_solver::{EnergyRecord, Observer, SimState, StepStats};
use crate::geometry::Vec2;
use crate::restriction::NormReport;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const ENERGY_COLUMNS: [&str; 6] = ["t", "kinetic", "diss_F", "diss_Fstar", "work", "gap"];
pub const STUDY_COLUMNS: [&str; 6] = ["N", "vol_N", "err_L2", "err_grad_Lp", "energy_drift", "max_gap"];
pub const NORM_COLUMNS: [&str; 6] = ["N", "p", "r_min", "ratio_L", "ratio_W", "c_estimate"];

/// One line of `study.csv`. Failed runs carry `NaN` metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyCsvRow {
    pub n: usize,
    pub vol_n: f64,
    pub err_l2: f64,
    pub err_grad_lp: f64,
    pub energy_drift: f64,
    pub max_gap: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

fn bad_data(path: &Path, why: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {why}", path.display())))
}

fn write_table(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let got: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_owned).collect();
    if got != header {
        return Err(bad_data(path, format!("header {got:?} does not match {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad_data(path, format!("{s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_energy_csv(path: &Path, records: &[EnergyRecord]) -> Result<()> {
    write_table(
        path,
        &ENERGY_COLUMNS,
        records.iter().map(|r| {
            [r.t, r.kinetic, r.dissipation_f, r.dissipation_fstar, r.work, r.fenchel_gap_total]
                .into_iter()
                .map(num)
                .collect()
        }),
    )
}

pub fn read_energy_csv(path: &Path) -> Result<Vec<EnergyRecord>> {
    Ok(read_table(path, &ENERGY_COLUMNS)?
        .into_iter()
        .map(|r| EnergyRecord {
            t: r[0],
            kinetic: r[1],
            dissipation_f: r[2],
            dissipation_fstar: r[3],
            work: r[4],
            fenchel_gap_total: r[5],
        })
        .collect())
}

pub fn write_study_csv(path: &Path, rows: &[StudyCsvRow]) -> Result<()> {
    write_table(
        path,
        &STUDY_COLUMNS,
        rows.iter().map(|r| {
            vec![r.n.to_string(), num(r.vol_n), num(r.err_l2), num(r.err_grad_lp), num(r.energy_drift), num(r.max_gap)]
        }),
    )
}

pub fn read_study_csv(path: &Path) -> Result<Vec<StudyCsvRow>> {
    read_table(path, &STUDY_COLUMNS)?
        .into_iter()
        .map(|r| {
            if r[0] < 0.0 || r[0].fract() != 0.0 {
                return Err(bad_data(path, format!("N must be a non-negative integer, got {}", r[0])));
            }
            Ok(StudyCsvRow {
                n: r[0] as usize,
                vol_n: r[1],
                err_l2: r[2],
                err_grad_lp: r[3],
                energy_drift: r[4],
                max_gap: r[5],
            })
        })
        .collect()
}

pub fn write_norm_csv(path: &Path, reports: &[NormReport]) -> Result<()> {
    write_table(
        path,
        &NORM_COLUMNS,
        reports.iter().map(|r| {
            vec![r.n_bodies.to_string(), num(r.p), num(r.r_min), num(r.ratio_l), num(r.ratio_w), num(r.c_estimate)]
        }),
    )
}

/// Rows of a norm-report CSV as `[N, p, r_min, ratio_L, ratio_W, c_estimate]`.
pub fn read_norm_csv(path: &Path) -> Result<Vec<[f64; 6]>> {
    Ok(read_table(path, &NORM_COLUMNS)?.into_iter().map(|r| [r[0], r[1], r[2], r[3], r[4], r[5]]).collect())
}

/// Header line `nx ny lx ly origin_x origin_y`, then one line of `nx` values per cell row,
/// bottom row first.
pub fn write_snapshot(path: &Path, f: &ScalarField) -> Result<()> {
    let g = f.grid;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{} {} {} {} {} {}", g.nx(), g.ny(), g.lx(), g.ly(), g.origin().x, g.origin().y)?;
    let mut line = String::new();
    for row in f.data.chunks(g.nx()) {
        line.clear();
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            line.push_str(&num(*v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<ScalarField> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let head = lines.next().ok_or_else(|| bad_data(path, "empty snapshot"))??;
    let h: Vec<&str> = head.split_whitespace().collect();
    if h.len() != 6 {
        return Err(bad_data(path, "header must be `nx ny lx ly origin_x origin_y`"));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| bad_data(path, format!("{s:?}: {e}")));
    let real = |s: &str| s.parse::<f64>().map_err(|e| bad_data(path, format!("{s:?}: {e}")));
    let (nx, ny) = (int(h[0])?, int(h[1])?);
    let grid = Grid2::new(nx, ny, real(h[2])?, real(h[3])?, Vec2::new(real(h[4])?, real(h[5])?))?;
    let mut data = Vec::with_capacity(nx * ny);
    for line in lines {
        for tok in line?.split_whitespace() {
            data.push(real(tok)?);
        }
    }
    if data.len() != nx * ny {
        return Err(bad_data(path, format!("expected {} values, found {}", nx * ny, data.len())));
    }
    Ok(ScalarField { grid, data })
}

/// Writes `rho`, `ux` and `uy` (cell-centred) snapshots of the initial state and of
/// every `every`-th step into `dir`, named `<field>_<step:06>.txt`.
pub struct SnapshotWriter {
    dir: PathBuf,
    every: usize,
    steps: usize,
}

impl SnapshotWriter {
    pub fn new(dir: impl Into<PathBuf>, every: usize) -> Result<Self> {
        let dir = dir.into();
        if every > 0 {
            fs::create_dir_all(&dir)?;
        }
        Ok(SnapshotWriter { dir, every, steps: 0 })
    }

    fn write(&self, s: &SimState) -> Result<()> {
        let g = s.grid();
        let (cu, cv) = s.u.cell_centered();
        for (name, data) in [("rho", s.rho.data.clone()), ("ux", cu), ("uy", cv)] {
            let f = ScalarField { grid: g, data };
            write_snapshot(&self.dir.join(format!("{name}_{:06}.txt", self.steps)), &f)?;
        }
        Ok(())
    }
}

impl Observer for SnapshotWriter {
    fn start(&mut self, s: &SimState) -> Result<()> {
        self.steps = 0;
        if self.every > 0 {
            self.write(s)?;
        }
        Ok(())
    }

    fn step(&mut self, s: &SimState, _: &EnergyRecord, _: &StepStats) -> Result<()> {
        self.steps += 1;
        if self.every > 0 && self.steps % self.every == 0 {
            self.write(s)?;
        }
        Ok(())
    }
}

/// Files under `dir`, relative and sorted, with their sizes in bytes.
pub fn list_files(dir: &Path) -> Result<Vec<(String, u64)>> {
    fn walk(root: &Path, at: &Path, out: &mut Vec<(String, u64)>) -> Result<()> {
        for entry in fs::read_dir(at)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                out.push((rel, entry.metadata()?.len()));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Writes `manifest.txt`: the given `key: value` lines, then every file already in `dir`
/// with its size.
pub fn write_manifest(dir: &Path, entries: &[(&str, String)]) -> Result<PathBuf> {
    let files = list_files(dir)?;
    let path = dir.join("manifest.txt");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    for (k, v) in entries {
        writeln!(w, "{k}: {v}")?;
    }
    writeln!(w, "files:")?;
    for (f, size) in files.iter().filter(|(f, _)| f != "manifest.txt") {
        writeln!(w, "  {f} {size}")?;
    }
    w.flush()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid2::new(12, 8, 1.5, 1.0, Vec2::new(-0.25, 0.5)).unwrap();
        let f = ScalarField::from_fn(g, |p| (p.x * 7.1).sin() / 3.0 + p.y);
        let path = dir.path().join("s.txt");
        write_snapshot(&path, &f).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("12 8 1.5 1 -0.25 0.5\n"));
        assert_eq!(text.lines().count(), 9);
        assert_eq!(read_snapshot(&path).unwrap(), f);
    }

    #[test]
    fn snapshot_with_missing_values_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        fs::write(&path, "8 8 1 1 0 0\n1 2\n3\n").unwrap();
        assert!(read_snapshot(&path).unwrap_err().to_string().contains("expected 64 values, found 3"));
    }

    #[test]
    fn energy_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            EnergyRecord { t: 0.0, kinetic: 0.5, dissipation_f: 0.0, dissipation_fstar: 0.0, work: 0.0, fenchel_gap_total: 0.0 },
            EnergyRecord {
                t: 0.002,
                kinetic: 0.499_9,
                dissipation_f: 1e-3 / 3.0,
                dissipation_fstar: 2e-3 / 3.0,
                work: -1e-17,
                fenchel_gap_total: 1e-20,
            },
        ];
        let path = dir.path().join("energy.csv");
        write_energy_csv(&path, &recs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,kinetic,diss_F,diss_Fstar,work,gap");
        assert_eq!(read_energy_csv(&path).unwrap(), recs);
    }

    #[test]
    fn study_csv_keeps_nan_for_failed_runs() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            StudyCsvRow { n: 1, vol_n: 0.25, err_l2: 0.1, err_grad_lp: 2.0, energy_drift: -1e-3, max_gap: 0.0 },
            StudyCsvRow { n: 2, vol_n: 0.1, err_l2: f64::NAN, err_grad_lp: f64::NAN, energy_drift: f64::NAN, max_gap: f64::NAN },
        ];
        let path = dir.path().join("study.csv");
        write_study_csv(&path, &rows).unwrap();
        let back = read_study_csv(&path).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].err_l2.is_nan() && back[1].n == 2);
    }

    #[test]
    fn wrong_header_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, "t,kinetic\n0,1\n").unwrap();
        assert!(read_energy_csv(&path).unwrap_err().to_string().contains("header"));
    }

    #[test]
    fn manifest_lists_files_except_itself() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), "abc").unwrap();
        fs::write(dir.path().join("b.csv"), "x").unwrap();
        let m = write_manifest(dir.path(), &[("command", "run".into())]).unwrap();
        let text = fs::read_to_string(m).unwrap();
        assert_eq!(text, "command: run\nfiles:\n  b.csv 1\n  sub/a.txt 3\n");
    }
}
