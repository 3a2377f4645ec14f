//! Exponential-family primitives.
//!
//! A family has density `f(y; θ, φ) = exp[φ{yθ − b(θ)} + c(y, φ)]`. The linear
//! predictor reaches θ through a θ-link `θ = k(η)`; the canonical link is the
//! identity.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson as PoissonDist};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::{normal_cdf, normal_pdf, normal_quantile};

/// Below this distance from one the deformed logarithm switches to `log`.
pub const Q_LOG_BRANCH: f64 = 1e-12;

/// Probabilities are clamped into `[QR_CLAMP, 1 - QR_CLAMP]` before inverting.
pub const QR_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    /// {0, 1}
    Binary,
    /// {0, 1, 2, ...}
    Counts,
    /// the real line
    Real,
}

impl Support {
    pub fn is_discrete(self) -> bool {
        !matches!(self, Support::Real)
    }

    pub fn contains(self, y: f64) -> bool {
        match self {
            Support::Binary => y == 0.0 || y == 1.0,
            Support::Counts => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            Support::Real => y.is_finite(),
        }
    }
}

pub trait ExponentialFamily: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    /// Cumulant function.
    fn b(&self, theta: f64) -> f64;
    /// Mean function μ = ḃ(θ).
    fn b_dot(&self, theta: f64) -> f64;
    /// Variance function V = b̈(θ).
    fn b_ddot(&self, theta: f64) -> f64;
    fn c(&self, y: f64, phi: f64) -> f64;
    /// Inverse of the mean function.
    fn theta_from_mean(&self, mu: f64) -> f64;
    fn cdf(&self, y: f64, mu: f64, phi: f64) -> f64;
    fn support(&self) -> Support;
    /// Open interval Θ of admissible natural parameters.
    fn theta_domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
    /// Dispersion fixed by the family, if any.
    fn phi_fixed(&self) -> Option<f64>;
    fn sample(&self, rng: &mut ChaCha8Rng, theta: f64, phi: f64) -> f64;

    /// Mean used to start classical IRLS from the data alone.
    fn start_mean(&self, y: f64) -> f64;

    /// `F(y−)`, the left limit of the CDF.
    fn cdf_left(&self, y: f64, mu: f64, phi: f64) -> f64 {
        if self.support().is_discrete() {
            self.cdf(y - 1.0, mu, phi)
        } else {
            self.cdf(y, mu, phi)
        }
    }

    /// Log density of the saturated model, where the mean equals `y`.
    fn saturated_log_density(&self, y: f64, phi: f64) -> f64 {
        let theta = self.theta_from_mean(y);
        phi * (y * theta - self.b(theta)) + self.c(y, phi)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Bernoulli;

#[derive(Debug, Clone, Copy, Default)]
pub struct Poisson;

/// Normal with unknown mean; φ is the inverse variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Gaussian;

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl ExponentialFamily for Bernoulli {
    fn name(&self) -> &'static str {
        "bernoulli"
    }
    fn b(&self, theta: f64) -> f64 {
        if theta > 0.0 {
            theta + (-theta).exp().ln_1p()
        } else {
            theta.exp().ln_1p()
        }
    }
    fn b_dot(&self, theta: f64) -> f64 {
        logistic(theta)
    }
    fn b_ddot(&self, theta: f64) -> f64 {
        let e = (-theta.abs()).exp();
        e / ((1.0 + e) * (1.0 + e))
    }
    fn c(&self, _y: f64, _phi: f64) -> f64 {
        0.0
    }
    fn theta_from_mean(&self, mu: f64) -> f64 {
        (mu / (1.0 - mu)).ln()
    }
    fn cdf(&self, y: f64, mu: f64, _phi: f64) -> f64 {
        if y < 0.0 {
            0.0
        } else if y < 1.0 {
            1.0 - mu
        } else {
            1.0
        }
    }
    fn support(&self) -> Support {
        Support::Binary
    }
    fn phi_fixed(&self) -> Option<f64> {
        Some(1.0)
    }
    fn sample(&self, rng: &mut ChaCha8Rng, theta: f64, _phi: f64) -> f64 {
        if rng.random::<f64>() < self.b_dot(theta) {
            1.0
        } else {
            0.0
        }
    }
    fn start_mean(&self, y: f64) -> f64 {
        (y + 0.5) / 2.0
    }
    fn saturated_log_density(&self, _y: f64, _phi: f64) -> f64 {
        0.0
    }
}

impl ExponentialFamily for Poisson {
    fn name(&self) -> &'static str {
        "poisson"
    }
    fn b(&self, theta: f64) -> f64 {
        theta.exp()
    }
    fn b_dot(&self, theta: f64) -> f64 {
        theta.exp()
    }
    fn b_ddot(&self, theta: f64) -> f64 {
        theta.exp()
    }
    fn c(&self, y: f64, _phi: f64) -> f64 {
        -ln_gamma(y + 1.0)
    }
    fn theta_from_mean(&self, mu: f64) -> f64 {
        mu.ln()
    }
    /// Direct summation of the pmf, stopping once terms fall below 1e-15 of
    /// the running total.
    fn cdf(&self, y: f64, mu: f64, _phi: f64) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        let top = y.floor() as u64;
        let log_mu = mu.ln();
        let mut total = 0.0;
        for k in 0..=top {
            let kf = k as f64;
            let term = (-mu + kf * log_mu - ln_gamma(kf + 1.0)).exp();
            total += term;
            if kf > mu && term < 1e-15 * total {
                break;
            }
        }
        total.min(1.0)
    }
    fn support(&self) -> Support {
        Support::Counts
    }
    fn phi_fixed(&self) -> Option<f64> {
        Some(1.0)
    }
    fn sample(&self, rng: &mut ChaCha8Rng, theta: f64, _phi: f64) -> f64 {
        let mu = theta.exp();
        if mu <= 0.0 {
            return 0.0;
        }
        PoissonDist::new(mu).expect("positive Poisson mean").sample(rng)
    }
    fn start_mean(&self, y: f64) -> f64 {
        y + 0.1
    }
    fn saturated_log_density(&self, y: f64, phi: f64) -> f64 {
        if y == 0.0 {
            // limit of y log y − y as y → 0
            return 0.0;
        }
        let theta = y.ln();
        phi * (y * theta - y) + self.c(y, phi)
    }
}

impl ExponentialFamily for Gaussian {
    fn name(&self) -> &'static str {
        "gaussian"
    }
    fn b(&self, theta: f64) -> f64 {
        0.5 * theta * theta
    }
    fn b_dot(&self, theta: f64) -> f64 {
        theta
    }
    fn b_ddot(&self, _theta: f64) -> f64 {
        1.0
    }
    fn c(&self, y: f64, phi: f64) -> f64 {
        -0.5 * phi * y * y + 0.5 * (phi / (2.0 * std::f64::consts::PI)).ln()
    }
    fn theta_from_mean(&self, mu: f64) -> f64 {
        mu
    }
    fn cdf(&self, y: f64, mu: f64, phi: f64) -> f64 {
        normal_cdf((y - mu) * phi.sqrt())
    }
    fn support(&self) -> Support {
        Support::Real
    }
    fn phi_fixed(&self) -> Option<f64> {
        None
    }
    fn sample(&self, rng: &mut ChaCha8Rng, theta: f64, phi: f64) -> f64 {
        Normal::new(theta, 1.0 / phi.sqrt())
            .expect("finite normal parameters")
            .sample(rng)
    }
    fn start_mean(&self, y: f64) -> f64 {
        y
    }
}

/// Shared handle to a family.
#[derive(Clone)]
pub struct Family(Arc<dyn ExponentialFamily>);

impl Family {
    pub fn new<F: ExponentialFamily + 'static>(f: F) -> Self {
        Family(Arc::new(f))
    }
    pub fn bernoulli() -> Self {
        Family::new(Bernoulli)
    }
    pub fn poisson() -> Self {
        Family::new(Poisson)
    }
    pub fn gaussian() -> Self {
        Family::new(Gaussian)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "bernoulli" | "binomial" | "logistic" => Ok(Family::bernoulli()),
            "poisson" => Ok(Family::poisson()),
            "gaussian" | "normal" => Ok(Family::gaussian()),
            other => Err(Error::Usage(format!("unknown family '{other}'"))),
        }
    }

    /// Rejects θ outside the open interval Θ.
    pub fn check_theta(&self, theta: f64) -> Result<()> {
        let (lower, upper) = self.theta_domain();
        if theta.is_finite() && theta > lower && theta < upper {
            Ok(())
        } else {
            Err(Error::ThetaOutOfDomain {
                row: None,
                theta,
                lower,
                upper,
            })
        }
    }

    /// The dispersion to use when the caller supplies none.
    pub fn default_phi(&self) -> f64 {
        self.phi_fixed().unwrap_or(1.0)
    }
}

impl Deref for Family {
    type Target = dyn ExponentialFamily;
    fn deref(&self) -> &Self::Target {
        self.0.as_ref()
    }
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Family({})", self.name())
    }
}

pub trait ThetaLink: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn k(&self, eta: f64) -> f64;
    fn k_dot(&self, eta: f64) -> f64;
    fn k_ddot(&self, eta: f64) -> f64;
    /// Inverse of `k`.
    fn g(&self, theta: f64) -> f64;
    fn g_dot(&self, theta: f64) -> f64 {
        1.0 / self.k_dot(self.g(theta))
    }
    fn is_canonical(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Canonical;

impl ThetaLink for Canonical {
    fn name(&self) -> &'static str {
        "canonical"
    }
    fn k(&self, eta: f64) -> f64 {
        eta
    }
    fn k_dot(&self, _eta: f64) -> f64 {
        1.0
    }
    fn k_ddot(&self, _eta: f64) -> f64 {
        0.0
    }
    fn g(&self, theta: f64) -> f64 {
        theta
    }
    fn g_dot(&self, _theta: f64) -> f64 {
        1.0
    }
    fn is_canonical(&self) -> bool {
        true
    }
}

/// Probit model for a Bernoulli response, written as a θ-link:
/// `θ = logit Φ(η)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Probit;

/// `ln Φ(x)` without cancellation in the lower tail.
fn ln_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        normal_cdf(x).ln()
    } else {
        // Mills ratio asymptotics
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - 1.0 / x2).ln()
    }
}

/// φ(x) / {Φ(x)Φ(−x)}
fn probit_slope(x: f64) -> f64 {
    let lp = ln_normal_cdf(x);
    let lq = ln_normal_cdf(-x);
    let lpdf = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
    (lpdf - lp - lq).exp()
}

impl ThetaLink for Probit {
    fn name(&self) -> &'static str {
        "probit"
    }
    fn k(&self, eta: f64) -> f64 {
        ln_normal_cdf(eta) - ln_normal_cdf(-eta)
    }
    fn k_dot(&self, eta: f64) -> f64 {
        probit_slope(eta)
    }
    fn k_ddot(&self, eta: f64) -> f64 {
        let s = probit_slope(eta);
        let p = normal_cdf(eta);
        // d/dη [φ / (Φ(1−Φ))]
        -eta * s - s * normal_pdf(eta) * (1.0 - 2.0 * p) / (p * (1.0 - p))
    }
    fn g(&self, theta: f64) -> f64 {
        let p = logistic(theta);
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        // symmetric: use the smaller tail for accuracy
        if theta > 0.0 {
            -normal_quantile(logistic(-theta)).unwrap_or(f64::INFINITY)
        } else {
            normal_quantile(p).unwrap_or(f64::NEG_INFINITY)
        }
    }
}

#[derive(Clone)]
pub struct Link(Arc<dyn ThetaLink>);

impl Link {
    pub fn new<L: ThetaLink + 'static>(l: L) -> Self {
        Link(Arc::new(l))
    }
    pub fn canonical() -> Self {
        Link::new(Canonical)
    }
    pub fn probit() -> Self {
        Link::new(Probit)
    }
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "canonical" | "logit" | "log" | "identity" => Ok(Link::canonical()),
            "probit" => Ok(Link::probit()),
            other => Err(Error::Usage(format!("unknown link '{other}'"))),
        }
    }
}

impl Deref for Link {
    type Target = dyn ThetaLink;
    fn deref(&self) -> &Self::Target {
        self.0.as_ref()
    }
}

impl fmt::Debug for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Link({})", self.name())
    }
}

/// `l_q(u) = (u^{1−q} − 1)/(1 − q)`, with `l_1 = log`.
pub fn deformed_log(u: f64, q: f64) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::domain("deformed_log", format!("u = {u} must be positive")));
    }
    if !(q > 0.0) {
        return Err(Error::domain("deformed_log", format!("q = {q} must be positive")));
    }
    Ok(lq_of_log(u.ln(), q))
}

/// `l_q(exp(log_u))`, stable for very small densities.
pub fn lq_of_log(log_u: f64, q: f64) -> f64 {
    if (q - 1.0).abs() < Q_LOG_BRANCH {
        log_u
    } else {
        let a = 1.0 - q;
        (a * log_u).exp_m1() / a
    }
}

fn check_phi(function: &'static str, phi: f64) -> Result<()> {
    if phi > 0.0 && phi.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(function, format!("dispersion {phi} must be positive")))
    }
}

pub fn log_density(family: &Family, y: f64, theta: f64, phi: f64) -> Result<f64> {
    family.check_theta(theta)?;
    check_phi("log_density", phi)?;
    if !family.support().contains(y) {
        return Err(Error::domain(
            "log_density",
            format!("y = {y} outside the {} support", family.name()),
        ));
    }
    Ok(phi * (y * theta - family.b(theta)) + family.c(y, phi))
}

/// `ln J_q(θ) = b(qθ) − q b(θ)`.
pub fn log_jq(family: &Family, theta: f64, q: f64) -> Result<f64> {
    family.check_theta(theta)?;
    if (q - 1.0).abs() < Q_LOG_BRANCH {
        return Ok(0.0);
    }
    family.check_theta(q * theta)?;
    Ok(family.b(q * theta) - q * family.b(theta))
}

pub fn jq(family: &Family, theta: f64, q: f64) -> Result<f64> {
    Ok(log_jq(family, theta, q)?.exp())
}

/// Escort log density: `φ(r(1−q)+q){yθ − b(θ)} + (r(1−q)+1) c(y, φ)`.
pub fn escort_log_density(family: &Family, y: f64, theta: f64, phi: f64, q: f64, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::domain("escort_log_density", format!("r = {r} must be >= 0")));
    }
    log_density(family, y, theta, phi)?;
    let a = r * (1.0 - q) + q;
    let cr = r * (1.0 - q) + 1.0;
    Ok(phi * a * (y * theta - family.b(theta)) + cr * family.c(y, phi))
}

/// `∫ h(y) w(y) dy` over the support (a sum for discrete families), where the
/// integrand is concentrated near `center` with spread `scale`.
pub fn integrate_support<F>(family: &Family, center: f64, scale: f64, mut integrand: F) -> f64
where
    F: FnMut(f64) -> f64,
{
    match family.support() {
        Support::Binary => integrand(0.0) + integrand(1.0),
        Support::Counts => {
            let top = (center + 40.0 * scale.max(1.0) + 60.0).ceil() as u64;
            (0..=top).map(|k| integrand(k as f64)).sum()
        }
        Support::Real => {
            let half = 40.0 * scale;
            let m = 8000;
            let h = 2.0 * half / m as f64;
            let lo = center - half;
            let mut s = integrand(lo) + integrand(lo + 2.0 * half);
            for i in 1..m {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * integrand(lo + i as f64 * h);
            }
            s * h / 3.0
        }
    }
}

/// Total mass of the escort density. Values away from one mean expectations
/// under it are not those of a probability distribution.
pub fn escort_normalization(family: &Family, theta: f64, phi: f64, q: f64, r: f64) -> Result<f64> {
    escort_moment(family, theta, phi, q, r, |_| 1.0)
}

/// `∫ h(y) f_q(y) dy` without renormalizing.
pub fn escort_moment<H>(family: &Family, theta: f64, phi: f64, q: f64, r: f64, h: H) -> Result<f64>
where
    H: Fn(f64) -> f64,
{
    family.check_theta(theta)?;
    check_phi("escort_moment", phi)?;
    let a = r * (1.0 - q) + q;
    let mu = family.b_dot(theta);
    let sd = (family.b_ddot(theta) / (phi * a.max(1e-3))).sqrt();
    let mut err = None;
    let total = integrate_support(family, mu, sd, |y| match escort_log_density(family, y, theta, phi, q, r) {
        Ok(l) => h(y) * l.exp(),
        Err(e) => {
            err.get_or_insert(e);
            0.0
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileResidual {
    pub value: f64,
    /// The probability hit 0 or 1 and was clamped before inversion.
    pub clamped: bool,
}

/// `Φ⁻¹(F(y))` for continuous families; the randomized version
/// `Φ⁻¹(F(y−) + u[F(y) − F(y−)])` for discrete ones.
pub fn quantile_residual_base(family: &Family, y: f64, mu: f64, phi: f64, uniform: f64) -> Result<QuantileResidual> {
    check_phi("quantile_residual_base", phi)?;
    let p = if family.support().is_discrete() {
        if !(0.0..=1.0).contains(&uniform) {
            return Err(Error::domain(
                "quantile_residual_base",
                format!("uniform draw {uniform} outside [0, 1]"),
            ));
        }
        let lo = family.cdf_left(y, mu, phi);
        let hi = family.cdf(y, mu, phi);
        lo + uniform * (hi - lo)
    } else {
        family.cdf(y, mu, phi)
    };
    if !p.is_finite() {
        return Err(Error::NonFinite {
            location: format!("cdf at y = {y}, mu = {mu}"),
        });
    }
    let clamped = !(QR_CLAMP..=1.0 - QR_CLAMP).contains(&p);
    let value = normal_quantile(p.clamp(QR_CLAMP, 1.0 - QR_CLAMP))?;
    Ok(QuantileResidual { value, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use approx::assert_abs_diff_eq;

    fn families() -> Vec<Family> {
        vec![Family::bernoulli(), Family::poisson(), Family::gaussian()]
    }

    #[test]
    fn deformed_log_examples() {
        assert_eq!(deformed_log(1.0, 0.7).unwrap(), 0.0);
        assert_abs_diff_eq!(deformed_log(std::f64::consts::E, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(deformed_log(4.0, 0.5).unwrap(), 2.0, epsilon = 1e-14);
        assert!(deformed_log(0.0, 0.5).is_err());
        assert!(deformed_log(1.0, 0.0).is_err());
    }

    #[test]
    fn deformed_log_tends_to_log() {
        for u in [0.5_f64, 2.0, 10.0] {
            for h in [1e-3, 1e-4] {
                let gap = (deformed_log(u, 1.0 - h).unwrap() - u.ln()).abs();
                // first-order term is h (ln u)² / 2
                assert!(gap <= u.ln().powi(2) * h, "u={u} h={h} gap={gap}");
            }
        }
    }

    #[test]
    fn log_density_examples() {
        let b = Family::bernoulli();
        assert_abs_diff_eq!(log_density(&b, 1.0, 0.0, 1.0).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        let p = Family::poisson();
        assert_abs_diff_eq!(log_density(&p, 0.0, 0.0, 1.0).unwrap(), -1.0, epsilon = 1e-15);
        let g = Family::gaussian();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(log_density(&g, 0.3, 0.3, 1.0).unwrap(), expect, epsilon = 1e-14);
        assert!(log_density(&b, 0.5, 0.0, 1.0).is_err());
        assert!(log_density(&p, 1.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn jq_examples() {
        let b = Family::bernoulli();
        assert_abs_diff_eq!(jq(&b, 0.0, 0.8).unwrap(), 2f64.powf(0.2), epsilon = 1e-14);
        // closed form evaluated by hand: exp(-0.5e + e^0.5)
        let p = Family::poisson();
        assert_abs_diff_eq!(jq(&p, 1.0, 0.5).unwrap(), 1.335_866_782_534_061, epsilon = 1e-12);
        for f in families() {
            for i in -20..=20 {
                assert_eq!(jq(&f, i as f64 * 0.25, 1.0).unwrap(), 1.0);
            }
        }
    }

    #[derive(Debug)]
    struct HalfLine;
    impl ExponentialFamily for HalfLine {
        fn name(&self) -> &'static str {
            "half-line"
        }
        fn b(&self, theta: f64) -> f64 {
            -(1.0 + theta).ln()
        }
        fn b_dot(&self, theta: f64) -> f64 {
            -1.0 / (1.0 + theta)
        }
        fn b_ddot(&self, theta: f64) -> f64 {
            1.0 / (1.0 + theta).powi(2)
        }
        fn c(&self, _y: f64, _phi: f64) -> f64 {
            0.0
        }
        fn theta_from_mean(&self, mu: f64) -> f64 {
            -1.0 - 1.0 / mu
        }
        fn cdf(&self, _y: f64, _mu: f64, _phi: f64) -> f64 {
            0.5
        }
        fn support(&self) -> Support {
            Support::Real
        }
        fn theta_domain(&self) -> (f64, f64) {
            (-1.0, f64::INFINITY)
        }
        fn phi_fixed(&self) -> Option<f64> {
            Some(1.0)
        }
        fn sample(&self, _rng: &mut ChaCha8Rng, _theta: f64, _phi: f64) -> f64 {
            0.0
        }
        fn start_mean(&self, y: f64) -> f64 {
            y
        }
    }

    #[test]
    fn jq_reports_violated_bound() {
        let f = Family::new(HalfLine);
        // qθ = 0.5 * 3 = 1.5 is fine, θ = −0.5 with q = 3 is outside
        assert!(jq(&f, 3.0, 0.5).is_ok());
        match jq(&f, -0.5, 3.0) {
            Err(Error::ThetaOutOfDomain { lower, .. }) => assert_eq!(lower, -1.0),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn escort_examples() {
        let b = Family::bernoulli();
        let got = escort_log_density(&b, 1.0, 1.0, 1.0, 0.5, 2.0).unwrap();
        let expect = 1.5 * (1.0 - (1.0 + 1f64.exp()).ln());
        assert_abs_diff_eq!(got, expect, epsilon = 1e-14);
        for f in families() {
            for &(y, th) in &[(0.0, -0.4), (1.0, 0.3)] {
                for r in [0.0, 1.0, 2.0, 3.5] {
                    let phi = if f.phi_fixed().is_some() { 1.0 } else { 1.3 };
                    let e = escort_log_density(&f, y, th, phi, 1.0, r).unwrap();
                    assert_abs_diff_eq!(e, log_density(&f, y, th, phi).unwrap(), epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn escort_r1_equals_density_only_without_normalizer() {
        let b = Family::bernoulli();
        for q in [0.5, 0.8, 0.95] {
            let e = escort_log_density(&b, 1.0, 0.7, 1.0, q, 1.0).unwrap();
            assert_abs_diff_eq!(e, log_density(&b, 1.0, 0.7, 1.0).unwrap(), epsilon = 1e-15);
        }
        // c(y, φ) = −log 2 ≠ 0 for Poisson y = 2, so the normalizer is scaled by 2 − q
        let p = Family::poisson();
        let e = escort_log_density(&p, 2.0, 0.7, 1.0, 0.8, 1.0).unwrap();
        let d = log_density(&p, 2.0, 0.7, 1.0).unwrap();
        assert_abs_diff_eq!(e - d, 0.2 * p.c(2.0, 1.0), epsilon = 1e-14);
    }

    #[test]
    fn escort_normalization_bernoulli_r1() {
        let b = Family::bernoulli();
        for th in [-2.0, 0.0, 1.5] {
            let m = escort_normalization(&b, th, 1.0, 0.8, 1.0).unwrap();
            assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn densities_normalize() {
        for f in families() {
            for th in [-1.2, 0.0, 0.9] {
                let phi = if f.phi_fixed().is_some() { 1.0 } else { 2.5 };
                let m = escort_normalization(&f, th, phi, 1.0, 1.0).unwrap();
                assert_abs_diff_eq!(m, 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn cumulant_derivatives_match_finite_differences() {
        for f in families() {
            for i in -12..=12 {
                let th = i as f64 * 0.25;
                let h = 1e-5;
                let d1 = (f.b(th + h) - f.b(th - h)) / (2.0 * h);
                let d2 = (f.b_dot(th + h) - f.b_dot(th - h)) / (2.0 * h);
                assert!((d1 - f.b_dot(th)).abs() <= 1e-6 * f.b_dot(th).abs().max(1e-3));
                assert!((d2 - f.b_ddot(th)).abs() <= 1e-6 * f.b_ddot(th).abs().max(1e-3));
                assert!(f.b_ddot(th) > 0.0);
            }
        }
    }

    #[test]
    fn bernoulli_cumulant_is_stable() {
        let b = Family::bernoulli();
        assert_abs_diff_eq!(b.b(800.0), 800.0, epsilon = 1e-12);
        assert!(b.b(-800.0) >= 0.0 && b.b(-800.0) < 1e-300);
        assert!(b.b_ddot(800.0).is_finite());
    }

    #[test]
    fn links_invert() {
        let links = [Link::canonical(), Link::probit()];
        for l in links {
            let s = l.k_dot(0.0).signum();
            for i in -60..=60 {
                let eta = i as f64 * 0.1;
                assert!((l.g(l.k(eta)) - eta).abs() < 1e-10, "{} at {eta}", l.name());
                assert_eq!(l.k_dot(eta).signum(), s);
                assert!(l.k_dot(eta).abs() > 0.0);
                let h = 1e-5;
                let fd = (l.k(eta + h) - l.k(eta - h)) / (2.0 * h);
                assert!((fd - l.k_dot(eta)).abs() < 1e-6 * l.k_dot(eta).abs().max(1.0));
                let fd2 = (l.k_dot(eta + h) - l.k_dot(eta - h)) / (2.0 * h);
                assert!((fd2 - l.k_ddot(eta)).abs() < 1e-5 * l.k_ddot(eta).abs().max(1.0));
                let th = l.k(eta);
                let gd = (l.g(th + h) - l.g(th - h)) / (2.0 * h);
                assert!((gd - l.g_dot(th)).abs() < 1e-5 * l.g_dot(th).abs().max(1.0));
            }
        }
    }

    #[test]
    fn moments_match_cumulants() {
        let n = 1_000_000;
        for (fi, f) in families().into_iter().enumerate() {
            let th = 0.4;
            let phi = if f.phi_fixed().is_some() { 1.0 } else { 2.0 };
            let mut rng = RngStream::new(11, fi as u64).rng();
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let y = f.sample(&mut rng, th, phi);
                s1 += y;
                s2 += y * y;
            }
            let mean = s1 / n as f64;
            let var = s2 / n as f64 - mean * mean;
            let v = f.b_ddot(th) / phi;
            assert!((mean - f.b_dot(th)).abs() < 4.0 * (v / n as f64).sqrt(), "{}", f.name());
            // standard error of a sample variance, bounded via the fourth moment
            let mut m4 = 0.0;
            let mut rng = RngStream::new(12, fi as u64).rng();
            for _ in 0..n {
                m4 += (f.sample(&mut rng, th, phi) - f.b_dot(th)).powi(4);
            }
            let se = ((m4 / n as f64 - v * v) / n as f64).sqrt();
            assert!((var - v).abs() < 4.0 * se, "{} var {var} vs {v}", f.name());
        }
    }

    #[test]
    fn quantile_residual_examples() {
        let g = Family::gaussian();
        assert_abs_diff_eq!(quantile_residual_base(&g, 1.0, 1.0, 1.0, 0.0).unwrap().value, 0.0, epsilon = 1e-12);
        let r = quantile_residual_base(&g, 2.96, 1.0, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(r.value, 1.96, epsilon = 1e-10);
        // Poisson(3): F(1) = 4e^{-3}, F(2) = 8.5e^{-3}
        let p = Family::poisson();
        let e3 = (-3f64).exp();
        let expect = normal_quantile((4.0 * e3 + 8.5 * e3) / 2.0).unwrap();
        let got = quantile_residual_base(&p, 2.0, 3.0, 1.0, 0.5).unwrap();
        assert_abs_diff_eq!(got.value, expect, epsilon = 1e-12);
        assert!(!got.clamped);
        let far = quantile_residual_base(&g, 100.0, 0.0, 1.0, 0.0).unwrap();
        assert!(far.clamped);
        assert!(far.value.is_finite());
    }
}
