//! The MLq fitting engine.
//!
//! Maximizes `L_q(β) = Σ l_q(f(y_i; k(x_iᵀβ), φ))` by Newton-scoring with the
//! sensitivity matrix `B_n`, then calibrates the surrogate solution back to a
//! Fisher-consistent estimate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfam::{lq_of_log, Family, Link};
use crate::numerics::{maximize_1d, spd_inverse, weighted_crossprod, Cholesky, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Dispersion {
    Fixed(f64),
    /// Profile φ out of the Lq-likelihood (families with free dispersion).
    Profile,
}

#[derive(Debug, Clone)]
pub struct ModelData {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub family: Family,
    pub link: Link,
    pub dispersion: Dispersion,
    /// Current value of φ; the starting value when profiling.
    pub phi: f64,
    /// Known part of the predictor. Constrained fits use it to pin a
    /// particular solution of the hypothesis.
    pub offset: Option<Vec<f64>>,
}

impl ModelData {
    pub fn new(x: Matrix, y: Vec<f64>, family: Family, link: Link) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 {
            return Err(Error::InvalidData("no rows".into()));
        }
        if p == 0 {
            return Err(Error::InvalidData("design matrix has no columns".into()));
        }
        if y.len() != n {
            return Err(Error::InvalidData(format!(
                "response has {} values, design has {n} rows",
                y.len()
            )));
        }
        if n <= p {
            return Err(Error::InvalidData(format!("need more rows ({n}) than columns ({p})")));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite design entry at row {}", i % n)));
        }
        let support = family.support();
        if let Some(i) = y.iter().position(|&v| !support.contains(v)) {
            return Err(Error::InvalidData(format!(
                "response {} at row {i} outside the {} support",
                y[i],
                family.name()
            )));
        }
        let xtx = x.transpose() * &x;
        Cholesky::new(&xtx).map_err(|e| match e {
            Error::Singular { pivot, .. } => Error::Singular {
                pivot,
                context: format!("design matrix is rank deficient at column {pivot}"),
            },
            other => other,
        })?;
        let phi = family.default_phi();
        let dispersion = match family.phi_fixed() {
            Some(v) => Dispersion::Fixed(v),
            None => Dispersion::Fixed(1.0),
        };
        Ok(ModelData {
            x,
            y,
            family,
            link,
            dispersion,
            phi,
            offset: None,
        })
    }

    pub fn with_phi(mut self, phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::domain("ModelData::with_phi", format!("phi = {phi}")));
        }
        if let Some(fixed) = self.family.phi_fixed() {
            if fixed != phi {
                return Err(Error::Usage(format!(
                    "the {} family fixes phi = {fixed}",
                    self.family.name()
                )));
            }
        }
        self.phi = phi;
        self.dispersion = Dispersion::Fixed(phi);
        Ok(self)
    }

    /// Profile φ during fitting. Only meaningful for families with free
    /// dispersion.
    pub fn with_profiled_phi(mut self) -> Result<Self> {
        if self.family.phi_fixed().is_some() {
            return Err(Error::Usage(format!(
                "the {} family has fixed dispersion",
                self.family.name()
            )));
        }
        self.dispersion = Dispersion::Profile;
        Ok(self)
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != self.n() {
            return Err(Error::InvalidData("offset length differs from row count".into()));
        }
        self.offset = Some(offset);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn offset_at(&self, i: usize) -> f64 {
        self.offset.as_ref().map_or(0.0, |o| o[i])
    }

    /// `η = Xβ + offset`.
    pub fn predictor(&self, beta: &Vector) -> Result<Vec<f64>> {
        if beta.len() != self.p() {
            return Err(Error::domain(
                "predictor",
                format!("beta has length {}, expected {}", beta.len(), self.p()),
            ));
        }
        let eta = &self.x * beta;
        Ok((0..self.n()).map(|i| eta[i] + self.offset_at(i)).collect())
    }

    fn with_y(&self, y: Vec<f64>) -> ModelData {
        ModelData { y, ..self.clone() }
    }

    /// Copy of the data with a new response vector (same design).
    pub fn replace_response(&self, y: Vec<f64>) -> Result<ModelData> {
        if y.len() != self.n() {
            return Err(Error::InvalidData("response length differs from row count".into()));
        }
        let support = self.family.support();
        if let Some(i) = y.iter().position(|&v| !support.contains(v)) {
            return Err(Error::InvalidData(format!("response {} at row {i} outside support", y[i])));
        }
        Ok(self.with_y(y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Classical start from the data: μ₀ from the family's adjusted response.
    AdjustedResponse,
    /// Fit q = 1 from the adjusted response first, then start there.
    MlWarmStart,
    /// Start at these surrogate coefficients.
    Explicit(Vector),
}

#[derive(Debug, Clone)]
pub struct FitControl {
    pub q: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub init: Init,
    pub step_halving_max: usize,
    /// Doublings tried after a full scoring step improves the objective.
    pub step_expansion_max: usize,
}

impl Default for FitControl {
    fn default() -> Self {
        FitControl {
            q: 1.0,
            max_iter: 100,
            tol: 1e-8,
            init: Init::MlWarmStart,
            step_halving_max: 20,
            step_expansion_max: 4,
        }
    }
}

impl FitControl {
    pub fn with_q(q: f64) -> Self {
        FitControl {
            q,
            ..FitControl::default()
        }
    }

    /// The classical GLM routine: adjusted-response start, at most 25
    /// scoring steps. Matches reference fits computed under that cap.
    pub fn glm_protocol(q: f64) -> Self {
        FitControl {
            q,
            max_iter: 25,
            tol: 1e-8,
            init: Init::AdjustedResponse,
            step_halving_max: 20,
            step_expansion_max: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Usage(format!("q = {} must lie in (0, 1]", self.q)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Usage("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Usage("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub q: f64,
    /// Uncalibrated MLq solution.
    pub beta_star: Vec<f64>,
    /// Calibrated coefficients; present when the link is canonical or q = 1.
    pub beta_q: Option<Vec<f64>>,
    pub eta_star: Vec<f64>,
    pub eta_q: Vec<f64>,
    /// `U_i = f(y_i)^{1−q}` at the surrogate fit.
    pub weights: Vec<f64>,
    /// Calibrated means.
    pub mu: Vec<f64>,
    pub mu_star: Vec<f64>,
    #[serde(skip)]
    pub a_n: Matrix,
    #[serde(skip)]
    pub b_n: Matrix,
    #[serde(skip)]
    pub cov: Matrix,
    /// Fisher information `φ XᵀW X` at the calibrated predictor.
    #[serde(skip)]
    pub fisher: Matrix,
    /// `L_q` at the calibrated predictor.
    pub lq_value: f64,
    /// `L_q` at the surrogate predictor (the maximized value).
    pub lq_surrogate: f64,
    pub phi_hat: f64,
    pub iterations: usize,
    pub converged: bool,
    pub psi_norm: f64,
    /// Objective after each accepted step.
    pub trace: Vec<f64>,
    pub note: Option<String>,
}

impl FitResult {
    pub fn p(&self) -> usize {
        self.beta_star.len()
    }

    pub fn se(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn coefficients(&self) -> Result<Vector> {
        self.beta_q
            .as_ref()
            .map(|b| Vector::from_column_slice(b))
            .ok_or_else(|| Error::Usage("calibrated coefficients require a canonical link".into()))
    }

    pub fn beta_star_vec(&self) -> Vector {
        Vector::from_column_slice(&self.beta_star)
    }
}

/// Per-observation quantities at a predictor.
#[derive(Debug, Clone)]
pub(crate) struct Working {
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub kdot: Vec<f64>,
    pub logf: Vec<f64>,
    pub u: Vec<f64>,
}

pub(crate) fn working(data: &ModelData, eta: &[f64], q: f64, phi: f64) -> Result<Working> {
    let n = eta.len();
    let fam = &data.family;
    let link = &data.link;
    let mut w = Working {
        theta: Vec::with_capacity(n),
        mu: Vec::with_capacity(n),
        var: Vec::with_capacity(n),
        kdot: Vec::with_capacity(n),
        logf: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
    };
    for (i, &e) in eta.iter().enumerate() {
        let th = link.k(e);
        fam.check_theta(th).map_err(|err| err.with_row(i))?;
        let y = data.y[i];
        let logf = phi * (y * th - fam.b(th)) + fam.c(y, phi);
        w.theta.push(th);
        w.mu.push(fam.b_dot(th));
        w.var.push(fam.b_ddot(th));
        w.kdot.push(link.k_dot(e));
        w.logf.push(logf);
        w.u.push(((1.0 - q) * logf).exp());
    }
    Ok(w)
}

fn psi_from(data: &ModelData, w: &Working, phi: f64) -> Vector {
    // W^{1/2} V^{-1/2} = k̇ (sign kept so Ψ is the exact gradient)
    let r: Vec<f64> = (0..data.n())
        .map(|i| phi * w.u[i] * w.kdot[i] * (data.y[i] - w.mu[i]))
        .collect();
    data.x.transpose() * Vector::from_vec(r)
}

/// `J_i = J_q(θ_i)^{−φ}`.
pub(crate) fn j_weights(data: &ModelData, theta: &[f64], q: f64, phi: f64) -> Result<Vec<f64>> {
    let fam = &data.family;
    theta
        .iter()
        .enumerate()
        .map(|(i, &th)| {
            if (q - 1.0).abs() < crate::expfam::Q_LOG_BRANCH {
                return Ok(1.0);
            }
            fam.check_theta(q * th).map_err(|e| e.with_row(i))?;
            Ok((phi * (q * fam.b(th) - fam.b(q * th))).exp())
        })
        .collect()
}

/// Diagonals `W J` and `W J G K` at the surrogate predictor.
pub(crate) fn sandwich_weights(data: &ModelData, eta_star: &[f64], q: f64, phi: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let link = &data.link;
    let fam = &data.family;
    let n = eta_star.len();
    let mut wj = Vec::with_capacity(n);
    let mut wjgk = Vec::with_capacity(n);
    let theta: Vec<f64> = eta_star.iter().map(|&e| link.k(e)).collect();
    for (i, &th) in theta.iter().enumerate() {
        fam.check_theta(th).map_err(|e| e.with_row(i))?;
    }
    let j = j_weights(data, &theta, q, phi)?;
    for i in 0..n {
        let kd = link.k_dot(eta_star[i]);
        let w = fam.b_ddot(theta[i]) * kd * kd;
        let gk = if link.is_canonical() {
            1.0
        } else {
            let eta_q = link.g(q * theta[i]);
            link.g_dot(theta[i]) * link.k_dot(eta_q)
        };
        wj.push(w * j[i]);
        wjgk.push(w * j[i] * gk);
    }
    Ok((wj, wjgk))
}

fn check_beta(data: &ModelData, beta: &Vector) -> Result<Vec<f64>> {
    data.predictor(beta)
}

pub fn lq_objective(data: &ModelData, beta: &Vector, q: f64) -> Result<f64> {
    let eta = check_beta(data, beta)?;
    lq_at_predictor(data, &eta, q, data.phi)
}

pub(crate) fn lq_at_predictor(data: &ModelData, eta: &[f64], q: f64, phi: f64) -> Result<f64> {
    let w = working(data, eta, q, phi)?;
    Ok(w.logf.iter().map(|&l| lq_of_log(l, q)).sum())
}

pub fn robust_weights(data: &ModelData, beta: &Vector, q: f64) -> Result<Vec<f64>> {
    let eta = check_beta(data, beta)?;
    Ok(working(data, &eta, q, data.phi)?.u)
}

/// `Ψ_n(β) = φ XᵀW^{1/2}UV^{−1/2}(Y − μ)`, the gradient of `L_q`.
pub fn estimating_function(data: &ModelData, beta: &Vector, q: f64) -> Result<Vector> {
    let eta = check_beta(data, beta)?;
    let w = working(data, &eta, q, data.phi)?;
    Ok(psi_from(data, &w, data.phi))
}

/// Variability `A_n = φ/(2−q) XᵀWJX` and sensitivity `B_n = φ XᵀWJGKX`,
/// evaluated at surrogate coefficients.
pub fn matrices_ab(data: &ModelData, beta: &Vector, q: f64) -> Result<(Matrix, Matrix)> {
    let eta = check_beta(data, beta)?;
    matrices_ab_at(data, &eta, q, data.phi)
}

pub(crate) fn matrices_ab_at(data: &ModelData, eta_star: &[f64], q: f64, phi: f64) -> Result<(Matrix, Matrix)> {
    let (wj, wjgk) = sandwich_weights(data, eta_star, q, phi)?;
    let a = weighted_crossprod(&data.x, &wj) * (phi / (2.0 - q));
    let b = weighted_crossprod(&data.x, &wjgk) * phi;
    Ok((a, b))
}

/// `φ XᵀWX` at a predictor.
pub fn fisher_information(data: &ModelData, eta: &[f64], phi: f64) -> Result<Matrix> {
    let mut w = Vec::with_capacity(eta.len());
    for (i, &e) in eta.iter().enumerate() {
        let th = data.link.k(e);
        data.family.check_theta(th).map_err(|err| err.with_row(i))?;
        let kd = data.link.k_dot(e);
        w.push(data.family.b_ddot(th) * kd * kd);
    }
    Ok(weighted_crossprod(&data.x, &w) * phi)
}

/// `η_q = g(q k(η*))` per observation.
pub fn calibrate_predictor(link: &Link, eta_star: &[f64], q: f64) -> Result<Vec<f64>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain("calibrate", format!("q = {q} outside (0, 1]")));
    }
    if q == 1.0 {
        return Ok(eta_star.to_vec());
    }
    eta_star
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let v = link.g(q * link.k(e));
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::domain(
                    "calibrate",
                    format!("inverse link undefined at q·k(eta) = {} (row {i})", q * link.k(e)),
                ))
            }
        })
        .collect()
}

/// `β_q = q β*`; only defined for the canonical link (or q = 1).
pub fn calibrate_coefficients(link: &Link, beta_star: &Vector, q: f64) -> Result<Vector> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain("calibrate", format!("q = {q} outside (0, 1]")));
    }
    if q == 1.0 {
        return Ok(beta_star.clone());
    }
    if !link.is_canonical() {
        return Err(Error::Usage(format!(
            "coefficients cannot be calibrated under the {} link; use calibrated predictors",
            link.name()
        )));
    }
    Ok(beta_star * q)
}

fn start_predictor(data: &ModelData) -> Vec<f64> {
    (0..data.n())
        .map(|i| {
            let mu0 = data.family.start_mean(data.y[i]);
            data.link.g(data.family.theta_from_mean(mu0))
        })
        .collect()
}

fn inf_norm(v: &Vector) -> f64 {
    v.amax()
}

/// Newton-scoring for a fixed φ.
fn fit_fixed_phi(data: &ModelData, control: &FitControl, phi: f64) -> Result<FitResult> {
    let q = control.q;
    let n = data.n();
    let (mut eta, mut beta): (Vec<f64>, Option<Vector>) = match &control.init {
        Init::AdjustedResponse => (start_predictor(data), None),
        Init::Explicit(b) => (data.predictor(b)?, Some(b.clone())),
        Init::MlWarmStart => {
            if q == 1.0 {
                (start_predictor(data), None)
            } else {
                let ml = fit_fixed_phi(
                    data,
                    &FitControl {
                        q: 1.0,
                        init: Init::AdjustedResponse,
                        ..control.clone()
                    },
                    phi,
                )?;
                let b = ml.beta_star_vec();
                // start near the surrogate of the ML solution
                let b = if data.link.is_canonical() { b / q } else { b };
                let b = if data.predictor(&b).is_ok_and(|e| working(data, &e, q, phi).is_ok()) {
                    b
                } else {
                    ml.beta_star_vec()
                };
                (data.predictor(&b)?, Some(b))
            }
        }
    };
    let offset: Vec<f64> = (0..n).map(|i| data.offset_at(i)).collect();

    let mut w = working(data, &eta, q, phi)?;
    let psi0 = inf_norm(&psi_from(data, &w, phi));
    let mut current_obj = beta.as_ref().map(|_| w.logf.iter().map(|&l| lq_of_log(l, q)).sum::<f64>());
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut note = None;
    let mut psi_norm = f64::NAN;
    let mut scale0: Option<f64> = None;

    for it in 1..=control.max_iter {
        iterations = it;
        let psi = psi_from(data, &w, phi);
        let (_, d) = sandwich_weights(data, &eta, q, phi)?;
        let xtdx = weighted_crossprod(&data.x, &d);
        let z: Vec<f64> = (0..n).map(|i| d[i] * (eta[i] - offset[i])).collect();
        let rhs = data.x.transpose() * Vector::from_vec(z) + psi / phi;
        let chol = Cholesky::new(&xtdx).map_err(|e| match e {
            Error::Singular { pivot, .. } => Error::Singular {
                pivot,
                context: "X'WJGKX is singular: likely separation or indeterminacy".into(),
            },
            other => other,
        })?;
        let mut beta_new = chol.solve_vec(&rhs);
        if beta_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("scoring step {it}"),
            });
        }

        // merit-function safeguard
        let mut new_eval = eval_candidate(data, &beta_new, q, phi);
        if let (Some(b_old), Some(obj_old)) = (beta.as_ref(), current_obj) {
            let mut halvings = 0;
            while halvings < control.step_halving_max
                && !matches!(&new_eval, Ok((_, _, obj)) if *obj >= obj_old - 1e-12 * obj_old.abs().max(1.0))
            {
                beta_new = (&beta_new + b_old) * 0.5;
                new_eval = eval_candidate(data, &beta_new, q, phi);
                halvings += 1;
            }
            // scoring steps are often too short under contamination; try
            // longer ones along the same direction while the objective rises
            if halvings == 0 {
                let dir = &beta_new - b_old;
                let mut t = 1.0;
                for _ in 0..control.step_expansion_max {
                    let Ok((_, _, obj_cur)) = &new_eval else { break };
                    let cand = b_old + &dir * (2.0 * t);
                    match eval_candidate(data, &cand, q, phi) {
                        Ok(ev) if ev.2 > *obj_cur => {
                            t *= 2.0;
                            beta_new = cand;
                            new_eval = Ok(ev);
                        }
                        _ => break,
                    }
                }
            }
        }
        let (eta_new, w_new, obj_new) = match new_eval {
            Ok(v) => v,
            Err(Error::ThetaOutOfDomain { .. }) | Err(Error::NonFinite { .. }) => {
                note = Some("natural parameter left its domain; indeterminate fit".into());
                break;
            }
            Err(e) => return Err(e),
        };

        let step = match &beta {
            Some(b) => inf_norm(&(&beta_new - b)),
            None => f64::INFINITY,
        };
        let scale = inf_norm(&beta_new);
        let s0 = *scale0.get_or_insert(scale.max(1.0));
        beta = Some(beta_new);
        eta = eta_new;
        w = w_new;
        current_obj = Some(obj_new);
        trace.push(obj_new);

        if scale > 1e4 * s0 || w.theta.iter().any(|t| t.abs() > 700.0) {
            note = Some("coefficients diverging: likely separation or indeterminacy".into());
            break;
        }
        psi_norm = inf_norm(&psi_from(data, &w, phi));
        if step <= control.tol * scale.max(1.0) && psi_norm <= control.tol * (1.0 + psi0) {
            converged = true;
            break;
        }
    }
    let beta_star = beta.ok_or_else(|| Error::NonFinite {
        location: "first scoring step".into(),
    })?;
    if psi_norm.is_nan() {
        psi_norm = inf_norm(&psi_from(data, &w, phi));
    }
    if !converged && note.is_none() {
        note = Some(format!("no convergence after {iterations} iterations"));
    }
    finish(data, q, phi, beta_star, eta, w, FitMeta {
        iterations,
        converged,
        psi_norm,
        trace,
        note,
    })
}

fn eval_candidate(data: &ModelData, beta: &Vector, q: f64, phi: f64) -> Result<(Vec<f64>, Working, f64)> {
    let eta = data.predictor(beta)?;
    let w = working(data, &eta, q, phi)?;
    let obj: f64 = w.logf.iter().map(|&l| lq_of_log(l, q)).sum();
    if !obj.is_finite() {
        return Err(Error::NonFinite {
            location: "Lq objective".into(),
        });
    }
    Ok((eta, w, obj))
}

struct FitMeta {
    iterations: usize,
    converged: bool,
    psi_norm: f64,
    trace: Vec<f64>,
    note: Option<String>,
}

fn nan_matrix(p: usize) -> Matrix {
    Matrix::from_element(p, p, f64::NAN)
}

fn finish(
    data: &ModelData,
    q: f64,
    phi: f64,
    beta_star: Vector,
    eta_star: Vec<f64>,
    w: Working,
    meta: FitMeta,
) -> Result<FitResult> {
    let p = data.p();
    let eta_q = calibrate_predictor(&data.link, &eta_star, q)?;
    let mu: Vec<f64> = eta_q.iter().map(|&e| data.family.b_dot(data.link.k(e))).collect();
    let beta_q = if q == 1.0 || data.link.is_canonical() {
        Some(calibrate_coefficients(&data.link, &beta_star, q)?.iter().copied().collect())
    } else {
        None
    };
    let lq_value = lq_at_predictor(data, &eta_q, q, phi).unwrap_or(f64::NAN);
    let lq_surrogate: f64 = w.logf.iter().map(|&l| lq_of_log(l, q)).sum();

    let mats = (|| -> Result<(Matrix, Matrix, Matrix, Matrix)> {
        let (a, b) = matrices_ab_at(data, &eta_star, q, phi)?;
        let b_inv = spd_inverse(&b)?;
        let cov = crate::numerics::symmetrize(&(&b_inv * &a * &b_inv));
        let fisher = fisher_information(data, &eta_q, phi)?;
        Ok((a, b, cov, fisher))
    })();
    let (a_n, b_n, cov, fisher) = match mats {
        Ok(m) => m,
        Err(e) if !meta.converged => {
            let _ = e;
            (nan_matrix(p), nan_matrix(p), nan_matrix(p), nan_matrix(p))
        }
        Err(e) => return Err(e),
    };

    Ok(FitResult {
        q,
        beta_star: beta_star.iter().copied().collect(),
        beta_q,
        eta_star,
        eta_q,
        weights: w.u,
        mu,
        mu_star: w.mu,
        a_n,
        b_n,
        cov,
        fisher,
        lq_value,
        lq_surrogate,
        phi_hat: phi,
        iterations: meta.iterations,
        converged: meta.converged,
        psi_norm: meta.psi_norm,
        trace: meta.trace,
        note: meta.note,
    })
}

/// Fits the MLq estimator.
///
/// Returns `Ok` with `converged = false` when the iteration limit is hit or
/// the coefficients diverge; the caller decides whether that is fatal.
pub fn fit_mlq(data: &ModelData, control: &FitControl) -> Result<FitResult> {
    control.validate()?;
    match data.dispersion {
        Dispersion::Fixed(phi) => fit_fixed_phi(data, control, phi),
        Dispersion::Profile => {
            let mut phi = data.phi;
            let mut ctrl = control.clone();
            let mut fit = fit_fixed_phi(data, &ctrl, phi)?;
            for _ in 0..100 {
                let new_phi = estimate_phi_at(data, &fit.eta_q, control.q)?;
                let done = ((new_phi - phi) / phi).abs() < control.tol;
                phi = new_phi;
                ctrl.init = Init::Explicit(fit.beta_star_vec());
                fit = fit_fixed_phi(data, &ctrl, phi)?;
                if done {
                    return Ok(fit);
                }
            }
            fit.converged = false;
            fit.note = Some("dispersion profiling did not settle".into());
            Ok(fit)
        }
    }
}

/// Builds a full result at given surrogate coefficients without iterating.
pub fn evaluate_fit(data: &ModelData, beta_star: &Vector, q: f64) -> Result<FitResult> {
    let phi = data.phi;
    let eta = data.predictor(beta_star)?;
    let w = working(data, &eta, q, phi)?;
    let psi_norm = inf_norm(&psi_from(data, &w, phi));
    let obj: f64 = w.logf.iter().map(|&l| lq_of_log(l, q)).sum();
    finish(data, q, phi, beta_star.clone(), eta, w, FitMeta {
        iterations: 0,
        converged: true,
        psi_norm,
        trace: vec![obj],
        note: None,
    })
}

/// Fits a decreasing sequence of q values, warm-starting each from the
/// previous solution. Entry `j` is the fit at `qs[j]`.
pub fn fit_path(data: &ModelData, qs: &[f64], control: &FitControl) -> Vec<Result<FitResult>> {
    let mut out = Vec::with_capacity(qs.len());
    let mut prev: Option<(f64, Vector)> = None;
    for &q in qs {
        let mut ctrl = control.clone();
        ctrl.q = q;
        if let Some((q_prev, b)) = &prev {
            let start = if data.link.is_canonical() { b * (*q_prev / q) } else { b.clone() };
            ctrl.init = Init::Explicit(start);
        }
        let r = fit_mlq(data, &ctrl);
        if let Ok(f) = &r {
            if f.converged {
                prev = Some((q, f.beta_star_vec()));
            }
        }
        out.push(r);
    }
    out
}

/// Profiled dispersion `argmax_φ Σ l_q(f(y_i; k(x_iᵀβ_q), φ))`.
pub fn estimate_phi(data: &ModelData, beta_q: &Vector, q: f64) -> Result<f64> {
    let eta = data.predictor(beta_q)?;
    estimate_phi_at(data, &eta, q)
}

pub(crate) fn estimate_phi_at(data: &ModelData, eta: &[f64], q: f64) -> Result<f64> {
    if data.family.phi_fixed().is_some() {
        return Err(Error::Usage(format!("the {} family has fixed dispersion", data.family.name())));
    }
    let n = data.n() as f64;
    let rss: f64 = eta
        .iter()
        .zip(&data.y)
        .map(|(&e, &y)| (y - data.family.b_dot(data.link.k(e))).powi(2))
        .sum();
    if !(rss > 0.0) {
        return Err(Error::Bracket { lo: 0.0, hi: f64::INFINITY });
    }
    // bracket in log φ around the ML value n / RSS
    let centre = (n / rss).ln();
    let (lo, hi) = (centre - 12.0, centre + 12.0);
    let h = |lphi: f64| lq_at_predictor(data, eta, q, lphi.exp()).unwrap_or(f64::NAN);
    let (arg, _) = maximize_1d(h, lo, hi, 1e-10)?;
    if arg - lo < 1e-6 || hi - arg < 1e-6 {
        return Err(Error::Bracket { lo: lo.exp(), hi: hi.exp() });
    }
    Ok(arg.exp())
}
