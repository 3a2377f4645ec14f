//! Bundled example data.

use crate::error::Result;
use crate::estimate::ModelData;
use crate::expfam::{Family, Link};
use crate::numerics::Matrix;

/// Finney's vasoconstriction data: 39 rows of `volume,rate,y`.
pub const VASO_CSV: &str = include_str!("../data/vaso.csv");

/// `(volume, rate, y)` rows of the vasoconstriction data.
pub fn vaso_rows() -> Vec<(f64, f64, f64)> {
    VASO_CSV
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.trim().parse().expect("bundled data is numeric")).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}

/// Logistic model with intercept, log volume and log rate.
pub fn vaso() -> Result<ModelData> {
    let rows = vaso_rows();
    let x = Matrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => rows[i].0.ln(),
        _ => rows[i].1.ln(),
    });
    let y = rows.iter().map(|r| r.2).collect();
    ModelData::new(x, y, Family::bernoulli(), Link::canonical())
}
