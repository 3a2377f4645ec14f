//! Inference and diagnostics for MLq fits: robust deviance and AIC, tests of
//! linear hypotheses, the added-variable score, residuals, influence
//! functions and simulation envelopes.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{
    evaluate_fit, fit_mlq, lq_at_predictor, sandwich_weights, working, FitControl, FitResult, Init, ModelData,
};
use crate::expfam::{lq_of_log, quantile_residual_base};
use crate::numerics::{
    chi_square_sf, normal_quantile, quantile_sorted, spd_inverse, symmetric_eigenvalues, weighted_crossprod,
    Cholesky, Matrix, RngStream, Vector,
};
use crate::parallel::{map_indexed, Parallelism};

/// `H₀: Hβ = h` on the calibrated coefficients.
#[derive(Debug, Clone)]
pub struct LinearHypothesis {
    pub h_mat: Matrix,
    pub h: Vector,
}

impl LinearHypothesis {
    pub fn new(h_mat: Matrix, h: Vector) -> Result<Self> {
        if h_mat.nrows() == 0 || h_mat.nrows() != h.len() {
            return Err(Error::Usage(format!(
                "hypothesis has {} rows but {} right-hand values",
                h_mat.nrows(),
                h.len()
            )));
        }
        if h_mat.nrows() > h_mat.ncols() {
            return Err(Error::Usage("more restrictions than coefficients".into()));
        }
        Cholesky::new(&(&h_mat * h_mat.transpose())).map_err(|_| {
            Error::Usage("hypothesis matrix does not have full row rank".into())
        })?;
        Ok(LinearHypothesis { h_mat, h })
    }

    /// `β_j = value`.
    pub fn coordinate(p: usize, j: usize, value: f64) -> Result<Self> {
        if j >= p {
            return Err(Error::Usage(format!("coefficient index {j} out of range")));
        }
        let mut m = Matrix::zeros(1, p);
        m[(0, j)] = 1.0;
        LinearHypothesis::new(m, Vector::from_vec(vec![value]))
    }

    pub fn dof(&self) -> usize {
        self.h_mat.nrows()
    }

    fn check_p(&self, p: usize) -> Result<()> {
        if self.h_mat.ncols() != p {
            return Err(Error::Usage(format!(
                "hypothesis has {} columns, model has {p} coefficients",
                self.h_mat.ncols()
            )));
        }
        Ok(())
    }

    /// A particular solution of `Hβ = rhs` and a basis of the null space of `H`.
    fn parameterize(&self, rhs: &Vector) -> Result<(Vector, Matrix)> {
        let p = self.h_mat.ncols();
        let d = self.dof();
        let hht = &self.h_mat * self.h_mat.transpose();
        let beta0 = self.h_mat.transpose() * Cholesky::new(&hht)?.solve_vec(rhs);
        let hth = self.h_mat.transpose() * &self.h_mat;
        let eig = crate::numerics::symmetrize(&hth).symmetric_eigen();
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let basis = Matrix::from_fn(p, p - d, |i, j| eig.eigenvectors[(i, order[j])]);
        Ok((beta0, basis))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Wald,
    Score,
    Bilinear,
    Deviance,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl TestResult {
    fn chi_square(kind: TestKind, statistic: f64, dof: usize) -> Result<Self> {
        if !statistic.is_finite() {
            return Err(Error::NonFinite {
                location: format!("{kind:?} statistic"),
            });
        }
        // rounding can leave tiny negatives in a quadratic form
        let statistic = statistic.max(0.0);
        Ok(TestResult {
            kind,
            statistic,
            dof,
            p_value: chi_square_sf(statistic, dof)?,
        })
    }
}

/// `D_q = 2{L_q(alternative) − L_q(null)}` at the calibrated predictors.
///
/// Negative values down to −1e-8 are rounding and clamp to zero.
pub fn deviance_q(data: &ModelData, fit_null: &FitResult, fit_alt: &FitResult) -> Result<f64> {
    if fit_null.q != fit_alt.q {
        return Err(Error::Usage(format!(
            "fits use different q ({} vs {})",
            fit_null.q, fit_alt.q
        )));
    }
    let n = data.n();
    if fit_null.eta_q.len() != n || fit_alt.eta_q.len() != n {
        return Err(Error::Usage("fits were computed on data of a different size".into()));
    }
    let q = fit_alt.q;
    let l_alt = lq_at_predictor(data, &fit_alt.eta_q, q, fit_alt.phi_hat)?;
    let l_null = lq_at_predictor(data, &fit_null.eta_q, q, fit_null.phi_hat)?;
    let d = 2.0 * (l_alt - l_null);
    if d < -1e-8 {
        return Err(Error::Usage(format!(
            "deviance {d} is negative: the null model does not appear nested in the alternative"
        )));
    }
    Ok(d.max(0.0))
}

/// `AIC_q = −2 L_q(β̂_q) + 2 tr(B_n⁻¹A_n)`.
pub fn aic_q(data: &ModelData, fit: &FitResult) -> Result<f64> {
    let lq = lq_at_predictor(data, &fit.eta_q, fit.q, fit.phi_hat)?;
    Ok(-2.0 * lq + 2.0 * aic_penalty_trace(fit)?)
}

/// `tr(B_n⁻¹A_n)`.
pub fn aic_penalty_trace(fit: &FitResult) -> Result<f64> {
    let b = Cholesky::new(&fit.b_n)?;
    Ok(b.solve(&fit.a_n).trace())
}

/// Wald statistic `(Hβ̂_q − h)ᵀ(HΣHᵀ)⁻¹(Hβ̂_q − h)` with Σ the sandwich.
pub fn wald_test(fit: &FitResult, hyp: &LinearHypothesis) -> Result<TestResult> {
    hyp.check_p(fit.p())?;
    let beta = fit.coefficients()?;
    let diff = &hyp.h_mat * beta - &hyp.h;
    let middle = &hyp.h_mat * &fit.cov * hyp.h_mat.transpose();
    let stat = diff.dot(&Cholesky::new(&middle)?.solve_vec(&diff));
    TestResult::chi_square(TestKind::Wald, stat, hyp.dof())
}

/// MLq fit under `Hβ_q = h`, embedded in the full parameter space.
///
/// Writes `β* = β₀ + Nγ` with `Hβ₀ = h/q` and fits γ with `Xβ₀` as offset.
/// Requires a canonical link unless q = 1.
pub fn constrained_fit(data: &ModelData, hyp: &LinearHypothesis, control: &FitControl) -> Result<FitResult> {
    hyp.check_p(data.p())?;
    let q = control.q;
    if q != 1.0 && !data.link.is_canonical() {
        return Err(Error::Usage(
            "constrained fits for q < 1 need a canonical link".into(),
        ));
    }
    let (beta0, basis) = hyp.parameterize(&(&hyp.h / q))?;
    let base_off = data.predictor(&beta0)?;
    if basis.ncols() == 0 {
        return evaluate_fit(data, &beta0, q);
    }
    let reduced = ModelData {
        x: &data.x * &basis,
        offset: Some(base_off),
        ..data.clone()
    };
    let mut ctrl = control.clone();
    if matches!(ctrl.init, Init::Explicit(_)) {
        ctrl.init = Init::MlWarmStart;
    }
    let red = fit_mlq(&reduced, &ctrl)?;
    let beta_star = &beta0 + &basis * red.beta_star_vec();
    let mut full = evaluate_fit(data, &beta_star, q)?;
    full.iterations = red.iterations;
    full.converged = red.converged;
    full.note = red.note;
    full.trace = red.trace;
    Ok(full)
}

fn psi_at(data: &ModelData, fit: &FitResult) -> Result<Vector> {
    crate::estimate::estimating_function(data, &fit.beta_star_vec(), fit.q)
}

/// Score statistic at the constrained fit:
/// `Ψ̃ᵀB̃⁻¹Hᵀ(HΣ̃Hᵀ)⁻¹HB̃⁻¹Ψ̃`.
pub fn score_test(data: &ModelData, hyp: &LinearHypothesis, control: &FitControl) -> Result<TestResult> {
    let tilde = constrained_fit(data, hyp, control)?;
    score_from_constrained(data, &tilde, hyp)
}

pub fn score_from_constrained(data: &ModelData, tilde: &FitResult, hyp: &LinearHypothesis) -> Result<TestResult> {
    let psi = psi_at(data, tilde)?;
    let bpsi = Cholesky::new(&tilde.b_n)?.solve_vec(&psi);
    let hb = &hyp.h_mat * bpsi;
    let middle = &hyp.h_mat * &tilde.cov * hyp.h_mat.transpose();
    let stat = hb.dot(&Cholesky::new(&middle)?.solve_vec(&hb));
    TestResult::chi_square(TestKind::Score, stat, hyp.dof())
}

/// Bilinear-form statistic `Ψ̃ᵀB̃⁻¹Hᵀ(HΣ̂Hᵀ)⁻¹(Hβ̂_q − h)`.
pub fn bf_test(data: &ModelData, fit: &FitResult, hyp: &LinearHypothesis, control: &FitControl) -> Result<TestResult> {
    let tilde = constrained_fit(data, hyp, control)?;
    bf_from_constrained(data, fit, &tilde, hyp)
}

pub fn bf_from_constrained(
    data: &ModelData,
    fit: &FitResult,
    tilde: &FitResult,
    hyp: &LinearHypothesis,
) -> Result<TestResult> {
    hyp.check_p(fit.p())?;
    let psi = psi_at(data, tilde)?;
    let hb = &hyp.h_mat * Cholesky::new(&tilde.b_n)?.solve_vec(&psi);
    let diff = &hyp.h_mat * fit.coefficients()? - &hyp.h;
    let middle = &hyp.h_mat * &fit.cov * hyp.h_mat.transpose();
    let stat = hb.dot(&Cholesky::new(&middle)?.solve_vec(&diff));
    TestResult::chi_square(TestKind::Bilinear, stat, hyp.dof())
}

/// Quantities shared by the added-variable score and standardized residuals.
struct Leverage {
    /// `U k̇ (y − μ*)`
    score: Vec<f64>,
    /// `D = WJ`
    d: Vec<f64>,
    /// `C = GK`
    c: Vec<f64>,
    /// `P = X(XᵀWJGKX)⁻¹Xᵀ`
    p: Matrix,
}

fn leverage(data: &ModelData, fit: &FitResult) -> Result<Leverage> {
    let q = fit.q;
    let phi = fit.phi_hat;
    let w = working(data, &fit.eta_star, q, phi)?;
    let (wj, wjgk) = sandwich_weights(data, &fit.eta_star, q, phi)?;
    let c: Vec<f64> = wj.iter().zip(&wjgk).map(|(a, b)| b / a).collect();
    let inner = spd_inverse(&weighted_crossprod(&data.x, &wjgk))?;
    let p = &data.x * inner * data.x.transpose();
    let score = (0..data.n())
        .map(|i| w.u[i] * w.kdot[i] * (data.y[i] - w.mu[i]))
        .collect();
    Ok(Leverage { score, d: wj, c, p })
}

/// Score test for adding the column `z` to the null fit.
pub fn added_variable_score(data: &ModelData, fit_null: &FitResult, z: &[f64]) -> Result<TestResult> {
    let n = data.n();
    if z.len() != n {
        return Err(Error::Usage(format!("z has length {}, expected {n}", z.len())));
    }
    let lev = leverage(data, fit_null)?;
    let num: f64 = (0..n).map(|i| z[i] * lev.score[i]).sum();
    // v = (I − P D C) z
    let dcz = Vector::from_iterator(n, (0..n).map(|i| lev.d[i] * lev.c[i] * z[i]));
    let pdcz = &lev.p * dcz;
    let v: Vec<f64> = (0..n).map(|i| z[i] - pdcz[i]).collect();
    // zᵀ(I − DCP) D (I − PDC) z = vᵀ D v
    let den: f64 = (0..n).map(|i| lev.d[i] * v[i] * v[i]).sum();
    let scale: f64 = (0..n).map(|i| lev.d[i] * z[i] * z[i]).sum();
    if !(den > 1e-10 * scale) {
        return Err(Error::DegenerateDirection(
            "z lies in the column space of the design".into(),
        ));
    }
    let stat = (2.0 - fit_null.q) * fit_null.phi_hat * num * num / den;
    TestResult::chi_square(TestKind::Score, stat, 1)
}

/// Per-observation values; `flagged` lists the positions set to NaN or
/// clamped.
#[derive(Debug, Clone, Serialize)]
pub struct Residuals {
    pub values: Vec<f64>,
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualKind {
    Standardized,
    Deviance,
    Quantile,
}

impl std::str::FromStr for ResidualKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standardized" => Ok(ResidualKind::Standardized),
            "deviance" => Ok(ResidualKind::Deviance),
            "quantile" => Ok(ResidualKind::Quantile),
            other => Err(Error::Usage(format!("unknown residual type '{other}'"))),
        }
    }
}

/// `t_i`, the square root of the mean-shift score statistic with the sign of
/// the raw residual.
pub fn standardized_residuals(data: &ModelData, fit: &FitResult) -> Result<Residuals> {
    let lev = leverage(data, fit)?;
    let n = data.n();
    let pd = Matrix::from_fn(n, n, |i, j| lev.p[(i, j)] * lev.d[j]);
    let mut values = Vec::with_capacity(n);
    let mut flagged = Vec::new();
    for i in 0..n {
        let m = pd[(i, i)];
        let m_star: f64 = (0..n).map(|k| pd[(i, k)] * pd[(k, i)]).sum();
        let c = lev.c[i];
        let den = lev.d[i] * ((1.0 - c * m) - c * (m - c * m_star));
        if den > 0.0 && den.is_finite() {
            values.push((2.0 - fit.q).sqrt() * fit.phi_hat.sqrt() * lev.score[i] / den.sqrt());
        } else {
            values.push(f64::NAN);
            flagged.push(i);
        }
    }
    Ok(Residuals { values, flagged })
}

/// `sign(y − μ̂) √d` with `d = 2{l_q(y, y) − l_q(y, μ̂)}`.
pub fn deviance_residuals(data: &ModelData, fit: &FitResult) -> Result<Residuals> {
    let q = fit.q;
    let phi = fit.phi_hat;
    let w = working(data, &fit.eta_q, q, phi)?;
    let fam = &data.family;
    let values = (0..data.n())
        .map(|i| {
            let y = data.y[i];
            let sat = lq_of_log(fam.saturated_log_density(y, phi), q);
            let d = 2.0 * (sat - lq_of_log(w.logf[i], q));
            if y == fit.mu[i] {
                0.0
            } else {
                (y - fit.mu[i]).signum() * d.max(0.0).sqrt()
            }
        })
        .collect();
    Ok(Residuals {
        values,
        flagged: Vec::new(),
    })
}

/// Quantile residuals at the calibrated means; discrete families draw one
/// uniform per observation from `stream`.
pub fn quantile_residuals(data: &ModelData, fit: &FitResult, stream: RngStream) -> Result<Residuals> {
    let mut rng = stream.rng();
    let mut values = Vec::with_capacity(data.n());
    let mut flagged = Vec::new();
    for i in 0..data.n() {
        let u = if data.family.support().is_discrete() { rng.random::<f64>() } else { 0.0 };
        let r = quantile_residual_base(&data.family, data.y[i], fit.mu[i], fit.phi_hat, u)?;
        if r.clamped {
            flagged.push(i);
        }
        values.push(r.value);
    }
    Ok(Residuals { values, flagged })
}

pub fn residuals(data: &ModelData, fit: &FitResult, kind: ResidualKind, stream: RngStream) -> Result<Residuals> {
    match kind {
        ResidualKind::Standardized => standardized_residuals(data, fit),
        ResidualKind::Deviance => deviance_residuals(data, fit),
        ResidualKind::Quantile => quantile_residuals(data, fit, stream),
    }
}

/// `IF_q = B_n⁻¹ f^{1−q} φ k̇ (y − μ) x` at the surrogate fit.
pub fn influence_fn(data: &ModelData, fit: &FitResult, y_new: f64, x_new: &[f64]) -> Result<Vector> {
    if x_new.len() != fit.p() {
        return Err(Error::Usage(format!("x has length {}, expected {}", x_new.len(), fit.p())));
    }
    let fam = &data.family;
    let link = &data.link;
    let eta: f64 = x_new.iter().zip(&fit.beta_star).map(|(a, b)| a * b).sum();
    let theta = link.k(eta);
    fam.check_theta(theta)?;
    let phi = fit.phi_hat;
    let logf = phi * (y_new * theta - fam.b(theta)) + fam.c(y_new, phi);
    let u = ((1.0 - fit.q) * logf).exp();
    let s = phi * link.k_dot(eta) * (y_new - fam.b_dot(theta));
    let x = Vector::from_column_slice(x_new);
    Ok(Cholesky::new(&fit.b_n)?.solve_vec(&(x * (u * s))))
}

/// Pointwise bands for sorted residuals (a half-normal style QQ envelope).
#[derive(Debug, Clone, Serialize)]
pub struct Envelope {
    pub kind: ResidualKind,
    /// Standard normal quantiles for plotting positions.
    pub theoretical: Vec<f64>,
    pub observed: Vec<f64>,
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

fn sorted_finite(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Parametric-bootstrap envelope: simulate `reps` responses from the fitted
/// model, refit, and take pointwise 2.5% / 50% / 97.5% quantiles of the
/// sorted residuals.
pub fn envelope(
    data: &ModelData,
    fit: &FitResult,
    kind: ResidualKind,
    reps: usize,
    control: &FitControl,
    stream: RngStream,
    par: Parallelism,
) -> Result<Envelope> {
    if reps < 2 {
        return Err(Error::Usage("an envelope needs at least 2 replicates".into()));
    }
    let n = data.n();
    let observed = sorted_finite(residuals(data, fit, kind, stream.child(u64::MAX))?.values);
    let theta_q: Vec<f64> = fit.eta_q.iter().map(|&e| data.link.k(e)).collect();
    let mut ctrl = control.clone();
    ctrl.q = fit.q;
    ctrl.init = Init::Explicit(fit.beta_star_vec());

    let sims: Vec<Option<Vec<f64>>> = map_indexed(par, reps, |r| {
        let child = stream.child(r as u64);
        let mut rng = child.rng();
        let y: Vec<f64> = theta_q
            .iter()
            .map(|&t| data.family.sample(&mut rng, t, fit.phi_hat))
            .collect();
        let sim = data.replace_response(y).ok()?;
        let f = fit_mlq(&sim, &ctrl).ok()?;
        if !f.converged {
            return None;
        }
        let res = residuals(&sim, &f, kind, child.child(1)).ok()?;
        if res.values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(sorted_finite(res.values))
    });
    let ok: Vec<Vec<f64>> = sims.into_iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::Usage("too few envelope replicates converged".into()));
    }
    let mut lower = Vec::with_capacity(n);
    let mut median = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for i in 0..n {
        let col = sorted_finite(ok.iter().map(|v| v[i]).collect());
        lower.push(quantile_sorted(&col, 0.025));
        median.push(quantile_sorted(&col, 0.5));
        upper.push(quantile_sorted(&col, 0.975));
    }
    let theoretical = (0..n)
        .map(|i| normal_quantile((i as f64 + 1.0 - 0.375) / (n as f64 + 0.25)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Envelope {
        kind,
        theoretical,
        observed,
        lower,
        median,
        upper,
        replicates_used: ok.len(),
        replicates_failed: reps - ok.len(),
    })
}

/// Smallest eigenvalue of `sandwich − 𝓕⁻¹`.
pub fn sandwich_excess_min_eigenvalue(fit: &FitResult) -> Result<f64> {
    let finv = spd_inverse(&fit.fisher)?;
    Ok(symmetric_eigenvalues(&(&fit.cov - finv))[0])
}
