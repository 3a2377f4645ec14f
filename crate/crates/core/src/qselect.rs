//! Choosing the distortion parameter q.
//!
//! The stability rule walks down a grid `1 = q₁ > q₂ > … > q_m` and stops
//! where successive calibrated estimates first move by more than
//! `ρ = rho_factor · ‖β̂_{q_m}‖`. The efficiency rule minimizes the trace of
//! the sandwich covariance.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{fit_mlq, fit_path, FitControl, FitResult, Init, ModelData};
use crate::expfam::Family;
use crate::numerics::spd_inverse;
use crate::parallel::{map_indexed, Parallelism};

#[derive(Debug, Clone, Serialize)]
pub struct QGrid {
    /// Strictly decreasing, all in (0, 1].
    pub q_values: Vec<f64>,
    pub step: f64,
    pub q_min: f64,
    pub rho_factor: f64,
}

impl Default for QGrid {
    fn default() -> Self {
        QGrid::new(0.70, 0.01, 0.05).expect("default grid is valid")
    }
}

impl QGrid {
    /// Grid from 1 down to `q_min` in steps of `step`.
    pub fn new(q_min: f64, step: f64, rho_factor: f64) -> Result<Self> {
        if !(q_min > 0.0 && q_min <= 1.0) {
            return Err(Error::Usage(format!("q_min = {q_min} must lie in (0, 1]")));
        }
        if !(step > 0.0) {
            return Err(Error::Usage("grid step must be positive".into()));
        }
        if !(rho_factor > 0.0) {
            return Err(Error::Usage("rho factor must be positive".into()));
        }
        let mut q_values = Vec::new();
        let mut j = 0u32;
        loop {
            // round to kill accumulated drift in 1 − j·step
            let q = ((1.0 - j as f64 * step) * 1e10).round() / 1e10;
            if q < q_min - 1e-12 || q <= 0.0 {
                break;
            }
            q_values.push(q);
            j += 1;
        }
        Ok(QGrid {
            q_values,
            step,
            q_min,
            rho_factor,
        })
    }

    pub fn from_values(q_values: Vec<f64>, rho_factor: f64) -> Result<Self> {
        if q_values.is_empty() {
            return Err(Error::Usage("empty q grid".into()));
        }
        if q_values.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(Error::Usage("grid values must lie in (0, 1]".into()));
        }
        if q_values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Usage("grid must be strictly decreasing".into()));
        }
        let q_min = *q_values.last().expect("non-empty");
        let step = if q_values.len() > 1 { q_values[0] - q_values[1] } else { 0.0 };
        Ok(QGrid {
            q_values,
            step,
            q_min,
            rho_factor,
        })
    }

    /// Drops every q for which a pilot natural parameter `θ̂` would put the
    /// surrogate `θ̂/q` outside Θ. Returns the removed values.
    pub fn prune(&mut self, family: &Family, theta_hat: &[f64]) -> Vec<f64> {
        let ok = |q: f64| {
            theta_hat
                .iter()
                .all(|&t| family.check_theta(t).is_ok() && family.check_theta(t / q).is_ok())
        };
        let (keep, drop): (Vec<f64>, Vec<f64>) = self.q_values.iter().partition(|&&q| ok(q));
        self.q_values = keep;
        drop
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMethod {
    Stability,
    Efficiency,
}

#[derive(Debug, Clone, Serialize)]
pub struct QFitSummary {
    pub q: f64,
    pub beta_q: Option<Vec<f64>>,
    pub se: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub sandwich_trace: f64,
}

impl QFitSummary {
    fn of(f: &FitResult) -> Self {
        QFitSummary {
            q: f.q,
            beta_q: f.beta_q.clone(),
            se: f.se(),
            converged: f.converged,
            iterations: f.iterations,
            sandwich_trace: f.cov.trace(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QSelectResult {
    pub method: SelectMethod,
    pub q_opt: f64,
    /// The q values that produced usable fits, decreasing.
    pub q_values: Vec<f64>,
    /// `QV_j = ‖β̂_{q_j} − β̂_{q_{j+1}}‖` over `q_values`.
    pub qv_profile: Vec<f64>,
    pub rho: f64,
    /// Distance from the fit at `q_opt` to its predecessor on the grid
    /// (zero when `q_opt` is the first grid value).
    pub qv_at_opt: f64,
    /// The greatest `q_j` with `QV_j < ρ`, read literally.
    pub q_literal: Option<f64>,
    pub fits: Vec<QFitSummary>,
    /// Grid values whose fit failed or did not converge, with the reason.
    pub dropped: Vec<(f64, String)>,
}

/// `tr(𝓕_n⁻¹) / tr(B_n⁻¹A_nB_n⁻¹)`.
pub fn are(fit: &FitResult) -> Result<f64> {
    let finv = spd_inverse(&fit.fisher)?;
    let t = fit.cov.trace();
    if !(t > 0.0) {
        return Err(Error::NonFinite {
            location: "sandwich trace".into(),
        });
    }
    Ok(finv.trace() / t)
}

/// Fits every grid value. A control that starts from the ML warm start is
/// run as a warm-started chain down the grid; any other start fits each q
/// independently, which may run in parallel.
pub fn grid_fits(data: &ModelData, grid: &QGrid, control: &FitControl, par: Parallelism) -> Vec<Result<FitResult>> {
    if control.init == Init::MlWarmStart {
        fit_path(data, &grid.q_values, control)
    } else {
        map_indexed(par, grid.q_values.len(), |j| {
            let mut c = control.clone();
            c.q = grid.q_values[j];
            fit_mlq(data, &c)
        })
    }
}

fn usable(data: &ModelData, grid: &QGrid, control: &FitControl, par: Parallelism) -> (Vec<FitResult>, Vec<(f64, String)>) {
    let mut ok = Vec::new();
    let mut dropped = Vec::new();
    for (q, r) in grid.q_values.iter().zip(grid_fits(data, grid, control, par)) {
        match r {
            Ok(f) if f.converged => ok.push(f),
            Ok(f) => dropped.push((*q, f.note.unwrap_or_else(|| "not converged".into()))),
            Err(e) => dropped.push((*q, e.to_string())),
        }
    }
    (ok, dropped)
}

/// The vector compared across the grid: calibrated coefficients for
/// canonical links, calibrated predictors scaled by `1/√n` otherwise.
fn location(data: &ModelData, f: &FitResult) -> Vec<f64> {
    match &f.beta_q {
        Some(b) if data.link.is_canonical() || f.q == 1.0 => b.clone(),
        _ => {
            let s = 1.0 / (data.n() as f64).sqrt();
            f.eta_q.iter().map(|e| e * s).collect()
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Stability selection.
///
/// Descends from the top of the grid and returns the last q reached before
/// the first step with `QV_j ≥ ρ`; when every step is below ρ the first grid
/// value is returned. The literal "greatest q with `QV_j < ρ`" is reported
/// alongside in `q_literal`.
pub fn select_q_stability(data: &ModelData, grid: &QGrid, control: &FitControl, par: Parallelism) -> Result<QSelectResult> {
    let (fits, dropped) = usable(data, grid, control, par);
    if fits.len() < 3 {
        return Err(Error::Selection(format!(
            "only {} of {} grid fits converged",
            fits.len(),
            grid.q_values.len()
        )));
    }
    let locs: Vec<Vec<f64>> = fits.iter().map(|f| location(data, f)).collect();
    let qv: Vec<f64> = locs.windows(2).map(|w| distance(&w[0], &w[1])).collect();
    let last = locs.last().expect("at least three fits");
    let rho = grid.rho_factor * last.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q_values: Vec<f64> = fits.iter().map(|f| f.q).collect();

    let opt_idx = qv.iter().position(|&v| v >= rho).unwrap_or(0);
    let qv_at_opt = if opt_idx == 0 { 0.0 } else { qv[opt_idx - 1] };
    let q_literal = qv.iter().position(|&v| v < rho).map(|j| q_values[j]);

    Ok(QSelectResult {
        method: SelectMethod::Stability,
        q_opt: q_values[opt_idx],
        q_values,
        qv_profile: qv,
        rho,
        qv_at_opt,
        q_literal,
        fits: fits.iter().map(QFitSummary::of).collect(),
        dropped,
    })
}

/// Efficiency selection: the q minimizing `tr(B_n⁻¹A_nB_n⁻¹)` at its own
/// fit; ties go to the larger q.
pub fn select_q_efficiency(data: &ModelData, grid: &QGrid, control: &FitControl, par: Parallelism) -> Result<QSelectResult> {
    let (fits, dropped) = usable(data, grid, control, par);
    if fits.is_empty() {
        return Err(Error::Selection("no grid fit converged".into()));
    }
    let mut best = 0;
    for (j, f) in fits.iter().enumerate() {
        if f.cov.trace() < fits[best].cov.trace() {
            best = j;
        }
    }
    let locs: Vec<Vec<f64>> = fits.iter().map(|f| location(data, f)).collect();
    let qv: Vec<f64> = locs.windows(2).map(|w| distance(&w[0], &w[1])).collect();
    Ok(QSelectResult {
        method: SelectMethod::Efficiency,
        q_opt: fits[best].q,
        q_values: fits.iter().map(|f| f.q).collect(),
        qv_profile: qv,
        rho: f64::NAN,
        qv_at_opt: if best == 0 { 0.0 } else { distance(&locs[best], &locs[best - 1]) },
        q_literal: None,
        fits: fits.iter().map(QFitSummary::of).collect(),
        dropped,
    })
}
