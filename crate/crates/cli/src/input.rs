//! CSV ingestion: a response column plus numeric covariates.

use std::fs;
use std::path::Path;

use lqglm::estimate::ModelData;
use lqglm::expfam::{Family, Link};
use lqglm::numerics::{Matrix, Vector};

use crate::CliError;

pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_table(text: &str, source: &str) -> Result<Table, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::input(format!("{source}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(format!("{source}: {e}")))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.parse::<f64>().map_err(|_| {
                    CliError::input(format!(
                        "{source}: row {} column '{}': '{s}' is not a number",
                        i + 1,
                        headers.get(j).map_or("?", String::as_str)
                    ))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{source}: no rows")));
    }
    Ok(Table { headers, rows })
}

pub struct ModelSpec<'a> {
    pub response: &'a str,
    pub family: Family,
    pub link: Link,
    pub log: &'a [String],
    pub intercept: bool,
    pub phi: Option<f64>,
}

/// The fitted design and the name of each coefficient.
pub struct Loaded {
    pub data: ModelData,
    pub names: Vec<String>,
}

pub fn load(table: &Table, spec: &ModelSpec) -> Result<Loaded, CliError> {
    let col = |name: &str| {
        table
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::input(format!("no column named '{name}'")))
    };
    let yj = col(spec.response)?;
    for l in spec.log {
        if col(l)? == yj {
            return Err(CliError::input(format!("cannot log-transform the response '{l}'")));
        }
    }
    let mut names = Vec::new();
    if spec.intercept {
        names.push("(Intercept)".to_string());
    }
    let covs: Vec<usize> = (0..table.headers.len()).filter(|&j| j != yj).collect();
    for &j in &covs {
        let h = &table.headers[j];
        names.push(if spec.log.contains(h) { format!("log({h})") } else { h.clone() });
    }
    let n = table.rows.len();
    let p = names.len();
    let off = usize::from(spec.intercept);
    let mut x = Matrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != table.headers.len() {
            return Err(CliError::input(format!("row {} has {} fields", i + 1, row.len())));
        }
        if spec.intercept {
            x[(i, 0)] = 1.0;
        }
        for (k, &j) in covs.iter().enumerate() {
            let v = row[j];
            x[(i, k + off)] = if spec.log.contains(&table.headers[j]) {
                if v <= 0.0 {
                    return Err(CliError::input(format!(
                        "row {}: cannot take the log of {v} in '{}'",
                        i + 1,
                        table.headers[j]
                    )));
                }
                v.ln()
            } else {
                v
            };
        }
        y.push(row[yj]);
    }
    let mut data = ModelData::new(x, y, spec.family.clone(), spec.link.clone())?;
    if spec.family.phi_fixed().is_none() {
        data = match spec.phi {
            Some(phi) => data.with_phi(phi)?,
            None => data.with_profiled_phi()?,
        };
    } else if let Some(phi) = spec.phi {
        data = data.with_phi(phi)?;
    }
    Ok(Loaded { data, names })
}

/// A headerless numeric CSV, one matrix row per line.
pub fn read_matrix(path: &Path) -> Result<Matrix, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let rows = headerless(&text, &path.display().to_string())?;
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::input(format!("{}: rows differ in length", path.display())));
    }
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// A headerless numeric CSV read as one vector, row by row.
pub fn read_vector(path: &Path) -> Result<Vector, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let values: Vec<f64> = headerless(&text, &path.display().to_string())?.concat();
    Ok(Vector::from_vec(values))
}

fn headerless(text: &str, source: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::input(format!("{source}: {e}")))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| CliError::input(format!("{source}: '{s}' is not a number"))))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{source}: no rows")));
    }
    Ok(rows)
}
