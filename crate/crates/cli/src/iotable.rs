//! Input-output tables on disk.
//!
//! * `A.csv`: header row of sector names, then `d` rows of `d` coefficients.
//! * `R.csv`: header row (a label cell, then sector names); each row is an
//!   impact name followed by `d` intensities.
//! * `y.csv`: one column of `d` final demands, with an optional header row.

use std::path::Path;

use eqcausal::modelzoo::{hawkins_simon_check, IoTable};
use nalgebra::DMatrix;

use crate::error::CliError;

struct Sheet {
    file: String,
    header: Option<Vec<String>>,
    /// `(line, fields)` per data row.
    rows: Vec<(u64, Vec<String>)>,
}

fn read_sheet(path: &Path, header: HeaderMode) -> Result<Sheet, CliError> {
    let file = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&file, e))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(&file, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect::<Vec<_>>()));
    }
    let has_header = match header {
        HeaderMode::Required => true,
        HeaderMode::Optional => rows.first().is_some_and(|(_, f)| f.first().is_some_and(|s| s.parse::<f64>().is_err())),
    };
    let header = if has_header {
        if rows.is_empty() {
            return Err(CliError::Parse { file, line: 1, column: 1, message: "missing header row".into() });
        }
        Some(rows.remove(0).1)
    } else {
        None
    };
    Ok(Sheet { file, header, rows })
}

#[derive(Clone, Copy)]
enum HeaderMode {
    Required,
    Optional,
}

fn csv_error(file: &str, e: csv::Error) -> CliError {
    match e.kind() {
        csv::ErrorKind::Io(_) => CliError::Io { path: file.into(), source: std::io::Error::other(e.to_string()) },
        _ => {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Parse { file: file.into(), line, column: 0, message: e.to_string() }
        }
    }
}

fn number(sheet: &Sheet, line: u64, column: usize, s: &str) -> Result<f64, CliError> {
    let parse_err = |message: String| CliError::Parse { file: sheet.file.clone(), line, column: column + 1, message };
    let v: f64 = s.parse().map_err(|_| parse_err(format!("expected a number, found {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(format!("non-finite value {s:?}")));
    }
    Ok(v)
}

/// Loads and validates `A.csv`, `R.csv` and `y.csv`. Logs a warning when
/// `A` fails the Hawkins–Simon condition.
pub fn load_iotable_csv(a_path: &Path, r_path: &Path, y_path: &Path) -> Result<IoTable, CliError> {
    let a_sheet = read_sheet(a_path, HeaderMode::Required)?;
    let sectors = a_sheet.header.clone().expect("required header");
    let d = sectors.len();
    if a_sheet.rows.len() != d {
        return Err(CliError::DimensionMismatch(format!(
            "{}: header names {d} sectors but there are {} coefficient rows",
            a_sheet.file,
            a_sheet.rows.len()
        )));
    }
    let mut a = DMatrix::zeros(d, d);
    for (i, (line, fields)) in a_sheet.rows.iter().enumerate() {
        if fields.len() != d {
            return Err(CliError::DimensionMismatch(format!(
                "{} line {line}: {} values for {d} sectors",
                a_sheet.file,
                fields.len()
            )));
        }
        for (j, s) in fields.iter().enumerate() {
            let v = number(&a_sheet, *line, j, s)?;
            if v < 0.0 {
                return Err(CliError::NegativeEntry {
                    file: a_sheet.file.clone(),
                    cell: format!("A[{}, {}]", sectors[i], sectors[j]),
                    row: i,
                    column: j,
                    value: v,
                });
            }
            a[(i, j)] = v;
        }
    }

    let r_sheet = read_sheet(r_path, HeaderMode::Required)?;
    let r_header = r_sheet.header.as_ref().expect("required header");
    if r_header.len() != d + 1 {
        return Err(CliError::DimensionMismatch(format!(
            "{}: header names {} sectors, {} names {d}",
            r_sheet.file,
            r_header.len().saturating_sub(1),
            a_sheet.file
        )));
    }
    if r_header[1..] != sectors[..] {
        log::warn!("sector names in {} differ from {}", r_sheet.file, a_sheet.file);
    }
    let s = r_sheet.rows.len();
    let mut r = DMatrix::zeros(s, d);
    let mut impact_names = Vec::with_capacity(s);
    for (i, (line, fields)) in r_sheet.rows.iter().enumerate() {
        if fields.len() != d + 1 {
            return Err(CliError::DimensionMismatch(format!(
                "{} line {line}: {} values for {d} sectors",
                r_sheet.file,
                fields.len().saturating_sub(1)
            )));
        }
        impact_names.push(fields[0].clone());
        for j in 0..d {
            let v = number(&r_sheet, *line, j + 1, &fields[j + 1])?;
            if v < 0.0 {
                return Err(CliError::NegativeEntry {
                    file: r_sheet.file.clone(),
                    cell: format!("R[{}, {}]", fields[0], sectors[j]),
                    row: i,
                    column: j,
                    value: v,
                });
            }
            r[(i, j)] = v;
        }
    }

    let y_sheet = read_sheet(y_path, HeaderMode::Optional)?;
    if y_sheet.rows.len() != d {
        return Err(CliError::DimensionMismatch(format!(
            "{} names {d} sectors but {} has {} final-demand entries",
            a_sheet.file,
            y_sheet.file,
            y_sheet.rows.len()
        )));
    }
    let mut y = Vec::with_capacity(d);
    for (k, (line, fields)) in y_sheet.rows.iter().enumerate() {
        if fields.len() != 1 {
            return Err(CliError::DimensionMismatch(format!(
                "{} line {line}: expected one column, found {}",
                y_sheet.file,
                fields.len()
            )));
        }
        let v = number(&y_sheet, *line, 0, &fields[0])?;
        if v < 0.0 {
            return Err(CliError::NegativeEntry {
                file: y_sheet.file.clone(),
                cell: format!("y[{}]", sectors[k]),
                row: k,
                column: 0,
                value: v,
            });
        }
        y.push(v);
    }

    let table = IoTable { a, r, y, sector_names: sectors, impact_names };
    table.validate().map_err(|e| CliError::DimensionMismatch(e.to_string()))?;
    if !hawkins_simon_check(&table.a) {
        log::warn!("{} violates the Hawkins-Simon condition; equilibria may be negative or missing", a_sheet.file);
    }
    Ok(table)
}

/// Writes `A.csv`, `R.csv` and `y.csv` into `dir` in the format read by
/// [`load_iotable_csv`]. Values use Rust's shortest round-trip formatting.
pub fn write_iotable_csv(table: &IoTable, dir: &Path) -> Result<(), CliError> {
    let d = table.dim();
    let io = |p: &Path| {
        let path = p.to_path_buf();
        move |e: csv::Error| CliError::Io { path, source: std::io::Error::other(e.to_string()) }
    };
    let fmt = |v: f64| format!("{v:?}");

    let p = dir.join("A.csv");
    let mut w = csv::Writer::from_path(&p).map_err(io(&p))?;
    w.write_record(&table.sector_names).map_err(io(&p))?;
    for i in 0..d {
        w.write_record((0..d).map(|j| fmt(table.a[(i, j)]))).map_err(io(&p))?;
    }
    w.flush().map_err(|source| CliError::Io { path: p.clone(), source })?;

    let p = dir.join("R.csv");
    let mut w = csv::Writer::from_path(&p).map_err(io(&p))?;
    w.write_record(std::iter::once("impact").chain(table.sector_names.iter().map(String::as_str))).map_err(io(&p))?;
    for (s, name) in table.impact_names.iter().enumerate() {
        w.write_record(std::iter::once(name.clone()).chain((0..d).map(|j| fmt(table.r[(s, j)])))).map_err(io(&p))?;
    }
    w.flush().map_err(|source| CliError::Io { path: p.clone(), source })?;

    let p = dir.join("y.csv");
    let mut w = csv::Writer::from_path(&p).map_err(io(&p))?;
    w.write_record(["y"]).map_err(io(&p))?;
    for v in &table.y {
        w.write_record([fmt(*v)]).map_err(io(&p))?;
    }
    w.flush().map_err(|source| CliError::Io { path: p.clone(), source })?;
    Ok(())
}
