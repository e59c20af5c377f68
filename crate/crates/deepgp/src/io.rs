//! File formats of the toolkit: CSV matrices (header row, one datapoint per
//! row, shortest round-trip float formatting), a magic-tagged little-endian
//! binary matrix format for large inputs, PGM image grids for visual
//! inspection, the tab-separated training log and BO trace CSVs.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::train::IterRecord;
use ndarray::{Array2, ArrayView2};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

pub const MATRIX_MAGIC: &[u8; 8] = b"DGPMAT\0\0";
pub const MATRIX_FORMAT_VERSION: u32 = 1;

/// Write a CSV with a generated header (`c0,c1,...`). Rust's float
/// formatting emits the shortest representation that round-trips, so
/// rereading reproduces the values exactly.
pub fn write_csv<F: Real>(path: &Path, m: &ArrayView2<F>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{}", v.to_f64c())).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Read a CSV matrix. Empty cells and the literal `nan` parse as NaN (used
/// as the missing-value marker by imputation).
pub fn read_csv<F: Real>(path: &Path) -> Result<Array2<F>> {
    let file = std::fs::File::open(path).map_err(|e| Error::DataFormat {
        file: path.display().to_string(),
        line: 0,
        detail: e.to_string(),
    })?;
    let reader = std::io::BufReader::new(file);
    let mut rows: Vec<Vec<F>> = Vec::new();
    let mut width = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 {
            // header row; tolerate data files without one when every cell
            // parses as a number
            let all_numeric = trimmed
                .split(',')
                .all(|c| c.trim().parse::<f64>().is_ok() || c.trim().is_empty());
            if !all_numeric {
                width = Some(trimmed.split(',').count());
                continue;
            }
        }
        let cells: Vec<&str> = trimmed.split(',').collect();
        if let Some(w) = width {
            if cells.len() != w {
                return Err(Error::DataFormat {
                    file: path.display().to_string(),
                    line: idx + 1,
                    detail: format!("expected {} columns, found {}", w, cells.len()),
                });
            }
        } else {
            width = Some(cells.len());
        }
        let mut row = Vec::with_capacity(cells.len());
        for (col, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| Error::DataFormat {
                    file: path.display().to_string(),
                    line: idx + 1,
                    detail: format!("column {col}: `{cell}` is not a number"),
                })?
            };
            row.push(F::c(v));
        }
        rows.push(row);
    }
    let n = rows.len();
    let w = width.unwrap_or(0);
    if n == 0 || w == 0 {
        return Err(Error::DataFormat {
            file: path.display().to_string(),
            line: 0,
            detail: "no data rows".into(),
        });
    }
    let mut out = Array2::zeros((n, w));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Binary matrix: magic, u32 version, u64 rows, u64 cols, row-major f64 LE.
pub fn write_matrix_binary<F: Real>(path: &Path, m: &ArrayView2<F>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_f64c().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix_binary<F: Real>(path: &Path) -> Result<Array2<F>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::DataFormat {
            file: path.display().to_string(),
            line: 0,
            detail: "not a binary matrix file (bad magic)".into(),
        });
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    if u32::from_le_bytes(ver) != MATRIX_FORMAT_VERSION {
        return Err(Error::DataFormat {
            file: path.display().to_string(),
            line: 0,
            detail: "unsupported matrix format version".into(),
        });
    }
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let rows = u64::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let cols = u64::from_le_bytes(b) as usize;
    let mut out = Array2::zeros((rows, cols));
    for v in out.iter_mut() {
        r.read_exact(&mut b)?;
        *v = F::c(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Load a matrix by extension: `.bin`/`.mat` binary, anything else CSV.
pub fn read_matrix_auto<F: Real>(path: &Path) -> Result<Array2<F>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("mat") => read_matrix_binary(path),
        _ => read_csv(path),
    }
}

/// Rows rendered as h×w images tiled into a grid, written as binary PGM.
/// Values are clamped to [0, 1].
pub fn write_pgm_grid<F: Real>(
    path: &Path,
    rows: &ArrayView2<F>,
    h: usize,
    w: usize,
    per_row: usize,
) -> Result<()> {
    if h * w != rows.ncols() {
        return Err(Error::shape(
            "pgm",
            format!("{}×{} image does not match {} columns", h, w, rows.ncols()),
        ));
    }
    let n = rows.nrows();
    let per_row = per_row.max(1).min(n.max(1));
    let grid_rows = n.div_ceil(per_row);
    let height = grid_rows * h;
    let width = per_row * w;
    let mut img = vec![0u8; height * width];
    for (i, row) in rows.rows().into_iter().enumerate() {
        let gy = (i / per_row) * h;
        let gx = (i % per_row) * w;
        for py in 0..h {
            for px in 0..w {
                let v = row[py * w + px].to_f64c().clamp(0.0, 1.0);
                img[(gy + py) * width + gx + px] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "P5")?;
    writeln!(out, "{width} {height}")?;
    writeln!(out, "255")?;
    out.write_all(&img)?;
    Ok(())
}

/// Training log: one tab-separated line per accepted iteration with
/// iteration, bound, gradient infinity norm and wall-clock seconds.
pub fn write_training_log<F: Real>(path: &Path, trace: &[IterRecord<F>]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration\tbound\tgrad_inf_norm\twall_secs")?;
    for r in trace {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.iter,
            r.bound.to_f64c(),
            r.grad_inf_norm.to_f64c(),
            r.wall_secs
        )?;
    }
    Ok(())
}

/// BO trace: iteration, proposed point, objective value, best-so-far, and
/// how the point was proposed.
pub fn write_bo_trace<F: Real>(path: &Path, trace: &crate::bo::BoTrace<F>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let q = trace.state.domain.len();
    let mut header = vec!["iteration".to_string()];
    header.extend((0..q).map(|d| format!("x{d}")));
    header.push("value".into());
    header.push("best".into());
    header.push("kind".into());
    writeln!(w, "{}", header.join(","))?;
    for r in &trace.records {
        let mut cells = vec![r.iteration.to_string()];
        cells.extend(r.x.iter().map(|v| format!("{}", v.to_f64c())));
        cells.push(format!("{}", r.value.to_f64c()));
        cells.push(format!("{}", r.best.to_f64c()));
        cells.push(
            match r.kind {
                crate::bo::ProposalKind::Init => "init",
                crate::bo::ProposalKind::Acquisition => "acquisition",
                crate::bo::ProposalKind::RandomFallback => "random_fallback",
                crate::bo::ProposalKind::Resample => "resample",
            }
            .to_string(),
        );
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}
