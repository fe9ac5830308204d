//! CSV input: `cluster`, `y` and optional covariates `x1..xp`. An intercept
//! column is prepended to the covariates unless disabled.

use std::io::Read;
use std::path::Path;

use mixinf::model::{NerRow, NerSpec};

use crate::error::{invalid, CliResult};

#[derive(Debug, Clone)]
pub struct InputTable {
    pub spec: NerSpec,
    /// Names of the fixed-effect columns, `intercept` first when present.
    pub beta_names: Vec<String>,
}

pub fn read_table(path: &Path, intercept: bool) -> CliResult<InputTable> {
    let file = std::fs::File::open(path).map_err(|e| invalid(format!("cannot open {}: {e}", path.display())))?;
    parse_table(file, intercept)
}

fn column_positions(header: &csv::StringRecord) -> CliResult<(usize, usize, Vec<usize>)> {
    let mut cluster = None;
    let mut y = None;
    let mut xs: Vec<(usize, usize)> = Vec::new();
    for (pos, name) in header.iter().enumerate() {
        let name = name.trim();
        match name {
            "cluster" if cluster.is_none() => cluster = Some(pos),
            "y" if y.is_none() => y = Some(pos),
            _ => {
                let k = name
                    .strip_prefix('x')
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|k| *k >= 1)
                    .ok_or_else(|| invalid(format!("unexpected column '{name}' (allowed: cluster, y, x1..xp)")))?;
                if xs.iter().any(|(j, _)| *j == k) {
                    return Err(invalid(format!("column '{name}' appears twice")));
                }
                xs.push((k, pos));
            }
        }
    }
    let cluster = cluster.ok_or_else(|| invalid("missing required column 'cluster'"))?;
    let y = y.ok_or_else(|| invalid("missing required column 'y'"))?;
    xs.sort();
    for (expect, (k, _)) in xs.iter().enumerate() {
        if *k != expect + 1 {
            return Err(invalid(format!("covariate columns must be x1..x{}; x{} is missing", xs.len(), expect + 1)));
        }
    }
    Ok((cluster, y, xs.into_iter().map(|(_, pos)| pos).collect()))
}

fn parse_value(raw: Option<&str>, column: &str, row: usize) -> CliResult<f64> {
    let text = raw.map(str::trim).unwrap_or("");
    if text.is_empty() {
        return Err(invalid(format!("row {row}: missing value in column '{column}'")));
    }
    let v: f64 =
        text.parse().map_err(|_| invalid(format!("row {row}: '{text}' in column '{column}' is not a number")))?;
    if !v.is_finite() {
        return Err(invalid(format!("row {row}: non-finite value in column '{column}'")));
    }
    Ok(v)
}

/// Row numbers in messages count data rows from 1, excluding the header.
pub fn parse_table<R: Read>(reader: R, intercept: bool) -> CliResult<InputTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| invalid(format!("cannot read CSV header: {e}")))?.clone();
    let (c_pos, y_pos, x_pos) = column_positions(&header)?;
    if !intercept && x_pos.is_empty() {
        return Err(invalid("without an intercept at least one covariate column x1 is needed"));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| invalid(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(invalid(format!("row {row}: {} fields, header has {}", rec.len(), header.len())));
        }
        let cluster = rec.get(c_pos).unwrap_or("").trim();
        if cluster.is_empty() {
            return Err(invalid(format!("row {row}: missing value in column 'cluster'")));
        }
        let y = parse_value(rec.get(y_pos), "y", row)?;
        let mut x = Vec::with_capacity(x_pos.len() + 1);
        if intercept {
            x.push(1.0);
        }
        for (j, &pos) in x_pos.iter().enumerate() {
            x.push(parse_value(rec.get(pos), &format!("x{}", j + 1), row)?);
        }
        rows.push(NerRow { cluster: cluster.to_string(), y, x });
    }
    if rows.is_empty() {
        return Err(invalid("the table has no data rows"));
    }
    let mut beta_names = if intercept { vec!["intercept".to_string()] } else { Vec::new() };
    beta_names.extend((1..=x_pos.len()).map(|k| format!("x{k}")));
    Ok(InputTable { spec: NerSpec { rows }, beta_names })
}

/// Writes an intercept-first dataset in the input format.
pub fn write_table<W: std::io::Write>(writer: W, ds: &mixinf::model::LmmDataset) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(writer);
    let extra = ds.p().saturating_sub(1);
    let mut header = vec!["cluster".to_string(), "y".to_string()];
    header.extend((1..=extra).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for blk in ds.blocks() {
        for r in 0..blk.n() {
            let mut rec = vec![blk.id.clone(), format_f64(blk.y[r])];
            rec.extend((1..=extra).map(|c| format_f64(blk.x[(r, c)])));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn csv_err(e: csv::Error) -> crate::error::CliError {
    invalid(format!("CSV error: {e}"))
}
