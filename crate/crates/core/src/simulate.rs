//! Contamination Monte Carlo for Poisson regression.
//!
//! Each replicate draws `x_ij ~ U(0,1)`, `y_i ~ Poisson(exp(x_iᵀβ))`,
//! multiplies a random fraction ε of the responses by ν, and fits every
//! estimator. Replicate `k` uses random stream `k` under the design seed, so
//! the report does not depend on how replicates are scheduled.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{fit_mlq, FitControl, Init, ModelData};
use crate::expfam::{Family, Link};
use crate::numerics::{iqr, Matrix, RngStream, Vector};
use crate::parallel::{map_indexed, Parallelism};

#[derive(Debug, Clone, Serialize)]
pub struct SimDesign {
    pub n: usize,
    pub eps: f64,
    pub nu: f64,
    pub reps: usize,
    pub q_list: Vec<f64>,
    pub beta_true: Vec<f64>,
    pub seed: u64,
    /// Prepend an intercept column; `beta_true[0]` is then its coefficient.
    pub intercept: bool,
    /// Draw the covariates once and reuse them in every replicate.
    pub fixed_x: bool,
}

impl SimDesign {
    pub fn new(n: usize, eps: f64, nu: f64, reps: usize, q_list: Vec<f64>, seed: u64) -> Self {
        SimDesign {
            n,
            eps,
            nu,
            reps,
            q_list,
            beta_true: vec![1.0, 1.0, 1.0],
            seed,
            intercept: false,
            fixed_x: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps) {
            return Err(Error::Usage(format!("eps = {} must lie in [0, 1)", self.eps)));
        }
        if !(self.nu > 0.0) {
            return Err(Error::Usage(format!("nu = {} must be positive", self.nu)));
        }
        if self.reps == 0 {
            return Err(Error::Usage("reps must be at least 1".into()));
        }
        if self.beta_true.is_empty() {
            return Err(Error::Usage("beta_true is empty".into()));
        }
        if self.n <= self.beta_true.len() {
            return Err(Error::Usage("n must exceed the number of coefficients".into()));
        }
        if self.q_list.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(Error::Usage("every q must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn n_covariates(&self) -> usize {
        self.beta_true.len() - usize::from(self.intercept)
    }

    fn stream(&self, k: u64) -> RngStream {
        RngStream::new(self.seed, k)
    }
}

fn draw_x(design: &SimDesign, rng: &mut ChaCha8Rng) -> Matrix {
    let p = design.beta_true.len();
    let off = usize::from(design.intercept);
    let mut x = Matrix::zeros(design.n, p);
    for i in 0..design.n {
        if design.intercept {
            x[(i, 0)] = 1.0;
        }
        for j in 0..design.n_covariates() {
            x[(i, j + off)] = rng.random::<f64>();
        }
    }
    x
}

fn draw_y(design: &SimDesign, x: &Matrix, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fam = Family::poisson();
    let beta = Vector::from_column_slice(&design.beta_true);
    let eta = x * beta;
    eta.iter().map(|&e| fam.sample(rng, e, 1.0)).collect()
}

/// One clean dataset from the design.
pub fn gen_dataset(design: &SimDesign, rng: &mut ChaCha8Rng) -> Result<ModelData> {
    let x = draw_x(design, rng);
    let y = draw_y(design, &x, rng);
    ModelData::new(x, y, Family::poisson(), Link::canonical())
}

/// Multiplies `round(ε n)` responses, chosen without replacement, by ν and
/// rounds back to integers. Returns the new responses and the sorted indices.
pub fn contaminate(y: &[f64], eps: f64, nu: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(eps >= 0.0) || !(nu > 0.0) {
        return Err(Error::Usage(format!("invalid contamination eps = {eps}, nu = {nu}")));
    }
    let n = y.len();
    let m = (eps * n as f64).round() as usize;
    if m > n {
        return Err(Error::Usage("contamination count exceeds sample size".into()));
    }
    let mut idx = sample(rng, n, m).into_vec();
    idx.sort_unstable();
    let mut out = y.to_vec();
    for &i in &idx {
        out[i] = (nu * out[i]).round();
    }
    Ok((out, idx))
}

/// An estimator the harness can run on each replicate.
pub trait Estimator: Sync {
    fn label(&self) -> String;
    /// Estimated coefficients, or `None` when the fit is unusable.
    fn estimate(&self, data: &ModelData) -> Option<Vec<f64>>;
    fn q(&self) -> Option<f64> {
        None
    }
}

/// Calibrated MLq, warm-started from the ML fit.
#[derive(Debug, Clone)]
pub struct Mlq {
    pub q: f64,
    pub control: FitControl,
}

impl Mlq {
    pub fn new(q: f64) -> Self {
        Mlq {
            q,
            control: FitControl::default(),
        }
    }
}

impl Estimator for Mlq {
    fn label(&self) -> String {
        format!("mlq({})", self.q)
    }
    fn q(&self) -> Option<f64> {
        Some(self.q)
    }
    fn estimate(&self, data: &ModelData) -> Option<Vec<f64>> {
        let ml = fit_mlq(
            data,
            &FitControl {
                q: 1.0,
                init: Init::AdjustedResponse,
                ..self.control.clone()
            },
        )
        .ok()?;
        if !ml.converged {
            return None;
        }
        let fit = if self.q == 1.0 {
            ml
        } else {
            let start = ml.beta_star_vec() / self.q;
            fit_mlq(
                data,
                &FitControl {
                    q: self.q,
                    init: Init::Explicit(start),
                    ..self.control.clone()
                },
            )
            .ok()?
        };
        if fit.converged {
            fit.beta_q
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimRow {
    pub n: usize,
    pub eps: f64,
    pub nu: f64,
    pub estimator: String,
    pub q: Option<f64>,
    /// `‖mean_k(β̂_k) − β‖`
    pub bias: f64,
    /// Mean over coefficients of the interquartile range of `β̂_kj`.
    pub iqr: f64,
    pub nonconverged: usize,
    /// More than 10% of replicates failed.
    pub unreliable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub design: SimDesign,
    pub rows: Vec<SimRow>,
    /// Wall-clock seconds; excluded from serialized output so that reports
    /// are byte-identical across runs.
    #[serde(skip)]
    pub runtime: f64,
}

impl SimReport {
    pub fn row(&self, q: f64) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.q == Some(q))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidData(e.to_string());
        w.write_record(["n", "eps", "nu", "q", "bias", "iqr", "nonconverged"]).map_err(err)?;
        for r in &self.rows {
            let q = r.q.map_or_else(|| r.estimator.clone(), |q| q.to_string());
            w.write_record([
                r.n.to_string(),
                r.eps.to_string(),
                r.nu.to_string(),
                q,
                r.bias.to_string(),
                r.iqr.to_string(),
                r.nonconverged.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidData(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidData(e.to_string()))
    }
}

/// Runs the MLq estimators for every q in the design.
pub fn run_study(design: &SimDesign, par: Parallelism) -> Result<SimReport> {
    let est: Vec<Mlq> = design.q_list.iter().map(|&q| Mlq::new(q)).collect();
    let refs: Vec<&dyn Estimator> = est.iter().map(|e| e as &dyn Estimator).collect();
    run_study_with(design, &refs, par)
}

pub fn run_study_with(design: &SimDesign, estimators: &[&dyn Estimator], par: Parallelism) -> Result<SimReport> {
    design.validate()?;
    let start = Instant::now();
    let fixed = design.fixed_x.then(|| draw_x(design, &mut design.stream(u64::MAX).rng()));

    let per_rep: Vec<Vec<Option<Vec<f64>>>> = map_indexed(par, design.reps, |k| {
        let mut rng = design.stream(k as u64).rng();
        let x = match &fixed {
            Some(x) => x.clone(),
            None => draw_x(design, &mut rng),
        };
        let y = draw_y(design, &x, &mut rng);
        let data = match contaminate(&y, design.eps, design.nu, &mut rng)
            .and_then(|(yc, _)| ModelData::new(x, yc, Family::poisson(), Link::canonical()))
        {
            Ok(d) => d,
            Err(_) => return vec![None; estimators.len()],
        };
        estimators.iter().map(|e| e.estimate(&data)).collect()
    });

    let p = design.beta_true.len();
    let mut rows = Vec::with_capacity(estimators.len());
    for (e_idx, est) in estimators.iter().enumerate() {
        let ok: Vec<&Vec<f64>> = per_rep.iter().filter_map(|r| r[e_idx].as_ref()).collect();
        let nonconverged = design.reps - ok.len();
        let (bias, spread) = if ok.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = ok.len() as f64;
            let bias = (0..p)
                .map(|j| {
                    let mean = ok.iter().map(|b| b[j]).sum::<f64>() / m;
                    (mean - design.beta_true[j]).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            let spread = (0..p)
                .map(|j| iqr(&ok.iter().map(|b| b[j]).collect::<Vec<_>>()))
                .sum::<f64>()
                / p as f64;
            (bias, spread)
        };
        rows.push(SimRow {
            n: design.n,
            eps: design.eps,
            nu: design.nu,
            estimator: est.label(),
            q: est.q(),
            bias,
            iqr: spread,
            nonconverged,
            unreliable: nonconverged * 10 > design.reps,
        });
    }
    Ok(SimReport {
        design: design.clone(),
        rows,
        runtime: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coefficients_give_unit_means() {
        let mut d = SimDesign::new(50, 0.0, 1.0, 1, vec![1.0], 1);
        d.beta_true = vec![0.0, 0.0, 0.0];
        let mut rng = RngStream::new(1, 0).rng();
        let x = draw_x(&d, &mut rng);
        let eta = &x * Vector::from_column_slice(&d.beta_true);
        assert!(eta.iter().all(|&e| e.exp() == 1.0));
    }

    #[test]
    fn mean_of_means_matches_moment() {
        let d = SimDesign::new(400, 0.0, 1.0, 1, vec![1.0], 77);
        let mut rng = d.stream(0).rng();
        let data = gen_dataset(&d, &mut rng).unwrap();
        let mu: Vec<f64> = (0..400)
            .map(|i| (data.x[(i, 0)] + data.x[(i, 1)] + data.x[(i, 2)]).exp())
            .collect();
        let e1 = std::f64::consts::E - 1.0;
        let mean = e1.powi(3);
        // E[e^{2U}] = (e² − 1)/2 per coordinate
        let second = ((std::f64::consts::E.powi(2) - 1.0) / 2.0).powi(3);
        let se = ((second - mean * mean) / 400.0).sqrt();
        let got = mu.iter().sum::<f64>() / 400.0;
        assert!((got - mean).abs() < 4.0 * se, "{got} vs {mean}");
    }

    #[test]
    fn datasets_reproducible() {
        let d = SimDesign::new(30, 0.1, 5.0, 1, vec![1.0], 5);
        let a = gen_dataset(&d, &mut d.stream(3).rng()).unwrap();
        let b = gen_dataset(&d, &mut d.stream(3).rng()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn contamination_contract() {
        let y: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let mut rng = RngStream::new(9, 0).rng();
        let (same, idx) = contaminate(&y, 0.0, 5.0, &mut rng).unwrap();
        assert_eq!(same, y);
        assert!(idx.is_empty());
        let (same, idx) = contaminate(&y, 0.2, 1.0, &mut rng).unwrap();
        assert_eq!(same, y);
        assert_eq!(idx.len(), 20);
        let (c, idx) = contaminate(&y, 0.10, 2.0, &mut rng).unwrap();
        assert_eq!(idx.len(), 10);
        for i in 0..100 {
            let expect = if idx.contains(&i) { 2.0 * y[i] } else { y[i] };
            assert_eq!(c[i], expect);
        }
    }

    #[test]
    fn report_independent_of_scheduling() {
        let d = SimDesign::new(100, 0.05, 5.0, 24, vec![1.0, 0.9], 2024);
        let a = run_study(&d, Parallelism::Sequential).unwrap();
        let b = run_study(&d, Parallelism::ThreadCount(4)).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.rows.iter().all(|r| r.bias >= 0.0 && r.iqr >= 0.0));
    }
}
