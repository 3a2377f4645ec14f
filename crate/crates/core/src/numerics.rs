//! Dense linear algebra, a golden-section maximizer, reference distributions
//! and seeded random streams.
//!
//! Matrices here are small (p rarely exceeds 20), so everything is plain
//! dense storage via `nalgebra`. The Cholesky factorization is written out
//! so that a failure reports the offending pivot, which the fitting code
//! turns into a rank-deficiency / separation diagnostic.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factorizes a symmetric positive-definite matrix. Only the lower
    /// triangle of `a` is read.
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::domain(
                "cholesky",
                format!("matrix is {}x{}, expected square", n, a.ncols()),
            ));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Singular {
                    pivot: j,
                    context: "cholesky factorization".into(),
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    pub fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.l.nrows();
        let mut x = b.clone();
        for c in 0..x.ncols() {
            // forward: L y = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        let m = Matrix::from_column_slice(b.len(), 1, b.as_slice());
        Vector::from_column_slice(self.solve(&m).as_slice())
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.l.nrows();
        let inv = self.solve(&Matrix::identity(n, n));
        symmetrize(&inv)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_symmetric(a, 1e-10)?;
    if b.nrows() != a.nrows() {
        return Err(Error::domain(
            "solve_spd",
            format!("right-hand side has {} rows, expected {}", b.nrows(), a.nrows()),
        ));
    }
    Ok(Cholesky::new(a)?.solve(b))
}

pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    Ok(Cholesky::new(a)?.inverse())
}

fn check_symmetric(a: &Matrix, tol: f64) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::domain("solve_spd", "matrix is not square"));
    }
    let scale = a.amax().max(1.0);
    for i in 0..a.nrows() {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return Err(Error::domain(
                    "solve_spd",
                    format!("matrix not symmetric at ({i}, {j})"),
                ));
            }
        }
    }
    Ok(())
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// `Xᵀ diag(d) X`.
pub fn weighted_crossprod(x: &Matrix, d: &[f64]) -> Matrix {
    let (n, p) = x.shape();
    debug_assert_eq!(n, d.len());
    let mut out = Matrix::zeros(p, p);
    for i in 0..n {
        let di = d[i];
        if di == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)] * di;
            for b in 0..=a {
                out[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            out[(b, a)] = out[(a, b)];
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for the maximum of a unimodal function on `[lo, hi]`.
///
/// Returns `(argmax, f(argmax))`. A non-finite probe aborts the search.
pub fn maximize_1d<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::domain("maximize_1d", format!("invalid interval [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("maximize_1d", "tolerance must be positive"));
    }
    let mut eval = |x: f64| -> Result<f64> {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                location: format!("maximize_1d probe x = {x}"),
            })
        }
    };
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    while (b - a) > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d)?;
        }
    }
    let x = 0.5 * (a + b);
    let fx = eval(x)?;
    let (mut best_x, mut best_f) = (x, fx);
    for (xx, ff) in [(c, fc), (d, fd)] {
        if ff > best_f {
            best_x = xx;
            best_f = ff;
        }
    }
    Ok((best_x, best_f))
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of the standard normal CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain("normal_quantile", format!("p = {p} not in (0, 1)")));
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * p))
}

/// Upper tail probability of the chi-square distribution with `dof` degrees
/// of freedom.
pub fn chi_square_sf(x: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::domain("chi_square_sf", "degrees of freedom must be >= 1"));
    }
    if !(x >= 0.0) {
        return Err(Error::domain("chi_square_sf", format!("x = {x} is negative")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(gamma_ur(dof as f64 / 2.0, x / 2.0))
}

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" definition). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25)
}

/// Identifies an independent random stream: one `(seed, stream_id)` pair
/// always yields the same draw sequence.
///
/// Streams are single-owner. Parallel work spawns one child stream per task
/// instead of sharing a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Derives the stream for task `index` beneath this one.
    pub fn child(&self, index: u64) -> RngStream {
        // splitmix64 finalizer keeps children of different parents apart
        let mut z = self
            .seed
            .wrapping_add(self.stream_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(0xD1B5_4A32_D192_ED03);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        RngStream {
            seed: z,
            stream_id: index,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 0).rng();
        let m = Matrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        &m * m.transpose() + Matrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_system() {
        let b = Matrix::from_column_slice(3, 1, &[1.0, -2.0, 3.5]);
        let x = solve_spd(&Matrix::identity(3, 3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn diagonal_system() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 4.0]));
        let b = Matrix::from_column_slice(2, 1, &[2.0, 8.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert_abs_diff_eq!(x[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[(1, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn inverse_by_residual() {
        let a = random_spd(5, 42);
        let inv = solve_spd(&a, &Matrix::identity(5, 5)).unwrap();
        let r = &a * &inv - Matrix::identity(5, 5);
        assert!(r.amax() < 1e-8);
    }

    #[test]
    fn round_trip_many_sizes() {
        for n in 1..=10 {
            for seed in 0..100 {
                let a = random_spd(n, seed * 31 + n as u64);
                let mut rng = RngStream::new(seed, 7).rng();
                let b = Matrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 10.0 - 5.0);
                let x = solve_spd(&a, &b).unwrap();
                let res = (&a * x - &b).amax();
                assert!(res <= 1e-8 * b.amax(), "n={n} seed={seed} residual {res}");
            }
        }
    }

    #[test]
    fn singular_reports_pivot() {
        let a = Matrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        match solve_spd(&a, &Matrix::identity(3, 3)) {
            Err(Error::Singular { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let a = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(
            solve_spd(&a, &Matrix::identity(2, 2)),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn golden_section_smooth_and_kinked() {
        let (x, v) = maximize_1d(|x| -(x - 2.0).powi(2), 0.0, 5.0, 1e-8).unwrap();
        assert_abs_diff_eq!(x, 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        let (x, _) = maximize_1d(|x| -(x - 1.0).abs(), 0.0, 3.0, 1e-8).unwrap();
        assert_abs_diff_eq!(x, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn golden_section_non_finite_probe() {
        let err = maximize_1d(|x| if x > 1.0 { f64::NAN } else { x }, 0.0, 3.0, 1e-6);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reference_distributions() {
        assert_eq!(chi_square_sf(0.0, 3).unwrap(), 1.0);
        assert_abs_diff_eq!(normal_quantile(0.5).unwrap(), 0.0, epsilon = 1e-15);
        assert!(chi_square_sf(-1.0, 1).is_err());
        assert!(chi_square_sf(1.0, 0).is_err());
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    /// χ²(1) tail at the 5% critical value, checked against Simpson
    /// integration of the density (substituting x = t² removes the
    /// singularity at zero).
    #[test]
    fn chi_square_critical_value_by_quadrature() {
        let c: f64 = 3.841_459;
        // P(X > c) = 1 - P(|Z| < sqrt c) = 1 - 2 ∫_0^{sqrt c} φ(t) dt
        let upper = c.sqrt();
        let m = 20_000;
        let h = upper / m as f64;
        let mut s = normal_pdf(0.0) + normal_pdf(upper);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * normal_pdf(i as f64 * h);
        }
        let oracle = 1.0 - 2.0 * s * h / 3.0;
        let got = chi_square_sf(c, 1).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-10);
        assert_abs_diff_eq!(got, 0.05, epsilon = 1e-7);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let mut x = -6.0;
        while x <= 6.0 {
            let back = normal_quantile(normal_cdf(x)).unwrap();
            assert!((back - x).abs() < 1e-8, "x={x} back={back}");
            x += 0.01;
        }
    }

    #[test]
    fn rng_streams_reproducible_and_independent() {
        let mut a = RngStream::new(99, 3).rng();
        let mut b = RngStream::new(99, 3).rng();
        for _ in 0..10_000 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
        let mut s = RngStream::new(99, 4).rng();
        let mut t = RngStream::new(99, 5).rng();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| s.random::<f64>()).collect();
        let ys: Vec<f64> = (0..n).map(|_| t.random::<f64>()).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            sxy += (xs[i] - mx) * (ys[i] - my);
            sxx += (xs[i] - mx).powi(2);
            syy += (ys[i] - my).powi(2);
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!(r.abs() < 0.01, "correlation {r}");
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(quantile_sorted(&v, 0.25), 1.75, epsilon = 1e-15);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.75), 3.25, epsilon = 1e-15);
        assert_abs_diff_eq!(iqr(&[4.0, 1.0, 3.0, 2.0]), 1.5, epsilon = 1e-15);
    }
}
