//! DCC/CCC-GARCH simulation with an optional persistence break, and the
//! model-based forecaster that turns known parameters into VaR, CoVaR and
//! reverse CoVaR thresholds or CoES/MES tail PITs.
//!
//! All innovations are multivariate t with unit-variance marginals (or
//! Gaussian when `nu` is infinite). Forecasts work in standardized
//! coordinates: a pair `(X, Y)` with conditional standard deviations
//! `(sigma_x, sigma_y)` and correlation `rho` is reduced to a unit-variance
//! pair, so every threshold is a scale times a standardized quantity.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::{beta::beta_reg, erf::erfc, gamma::ln_gamma};
use std::f64::consts::{PI, SQRT_2};

use crate::error::{ensure_finite, Error, Result};
use crate::numeric::{cholesky, integrate_upper, solve_decreasing};
use crate::series::{ForecastPayload, ForecastRecord, MeasureKind, ObservationRecord, RiskLevels};

/// Default number of discarded initial steps.
pub const DEFAULT_BURNIN: usize = 500;

// Absolute tolerance of the tail quadrature, tighter than the tail
// probabilities' required accuracy so that root finding can resolve
// |f| <= ROOT_FTOL.
const QUAD_TOL: f64 = 1e-13;
const ROOT_FTOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// DCC-GARCH parameters for `(X, Y_1, ..., Y_K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DccParams {
    pub k_plus_1: usize,
    pub omega_g: Vec<f64>,
    pub alpha_g: Vec<f64>,
    pub beta_g: Vec<f64>,
    pub alpha_q: f64,
    pub beta_q: f64,
    /// Degrees of freedom; `f64::INFINITY` selects Gaussian innovations.
    /// JSON accepts a number, `"inf"` or `null` for the Gaussian case.
    #[serde(serialize_with = "ser_nu", deserialize_with = "de_nu")]
    pub nu: f64,
    pub q_bar: Vec<Vec<f64>>,
}

fn ser_nu<S: Serializer>(nu: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if nu.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*nu)
    }
}

fn de_nu<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(f64::INFINITY),
        Some(Raw::Num(v)) => Ok(v),
        Some(Raw::Text(t)) if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity" | "gaussian") => {
            Ok(f64::INFINITY)
        }
        Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!("invalid degrees of freedom {t:?}"))),
    }
}

impl DccParams {
    /// The symmetric simulation design: `nu = 5`, `omega = 0.1`,
    /// `alpha_G = alpha_Q = 0.1`, `beta_G = beta_Q = 0.7` and an
    /// equicorrelated `Q_bar` with off-diagonal 0.5.
    pub fn baseline(k: usize) -> Self {
        let d = k + 1;
        Self {
            k_plus_1: d,
            omega_g: vec![0.1; d],
            alpha_g: vec![0.1; d],
            beta_g: vec![0.7; d],
            alpha_q: 0.1,
            beta_q: 0.7,
            nu: 5.0,
            q_bar: equicorrelation(d, 0.5),
        }
    }

    pub fn k(&self) -> usize {
        self.k_plus_1 - 1
    }

    pub fn is_gaussian(&self) -> bool {
        self.nu.is_infinite()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.k_plus_1;
        let bad = |msg: String| Err(Error::Parameter(msg));
        if d < 2 {
            return bad(format!("need at least two series, got k_plus_1 = {d}"));
        }
        for (name, v) in [("omega_g", &self.omega_g), ("alpha_g", &self.alpha_g), ("beta_g", &self.beta_g)] {
            if v.len() != d {
                return bad(format!("{name} has {} entries, expected {d}", v.len()));
            }
        }
        for i in 0..d {
            let (w, a, b) = (self.omega_g[i], self.alpha_g[i], self.beta_g[i]);
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("omega_g[{i}] = {w} must be positive"));
            }
            if !(a >= 0.0 && b >= 0.0 && a + b < 1.0) {
                return bad(format!(
                    "GARCH coefficients of series {i} violate alpha, beta >= 0, alpha + beta < 1: ({a}, {b})"
                ));
            }
        }
        if !(self.alpha_q >= 0.0 && self.beta_q >= 0.0 && self.alpha_q + self.beta_q < 1.0) {
            return bad(format!(
                "correlation dynamics violate alpha_q, beta_q >= 0, alpha_q + beta_q < 1: ({}, {})",
                self.alpha_q, self.beta_q
            ));
        }
        if !(self.nu > 2.0) {
            return bad(format!("degrees of freedom must exceed 2, got {}", self.nu));
        }
        if self.q_bar.len() != d || self.q_bar.iter().any(|row| row.len() != d) {
            return bad(format!("q_bar must be {d} x {d}"));
        }
        for i in 0..d {
            if self.q_bar[i][i] != 1.0 {
                return bad(format!("q_bar must have unit diagonal, entry {i} is {}", self.q_bar[i][i]));
            }
            for j in 0..i {
                if self.q_bar[i][j] != self.q_bar[j][i] || !self.q_bar[i][j].is_finite() {
                    return bad(format!("q_bar is not symmetric at ({i}, {j})"));
                }
            }
        }
        let flat: Vec<f64> = self.q_bar.iter().flatten().copied().collect();
        if cholesky(&flat, d).is_none() {
            return bad("q_bar is not positive definite".into());
        }
        Ok(())
    }

    /// Copy with every `beta_g` component and `beta_q` replaced.
    pub fn with_persistence(&self, beta_post: f64) -> Result<Self> {
        let mut p = self.clone();
        p.beta_g = vec![beta_post; self.k_plus_1];
        p.beta_q = beta_post;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("parameters: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// `d x d` matrix with unit diagonal and constant off-diagonal `rho`.
pub fn equicorrelation(d: usize, rho: f64) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { rho }).collect()).collect()
}

/// Upward (or downward) change of all persistence parameters after `t_star`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakSpec {
    pub t_star: usize,
    pub beta_post: f64,
}

/// Conditional moments of `W_t` given the past.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovForecast {
    /// Conditional standard deviations.
    pub d: Vec<f64>,
    /// Conditional correlation matrix, row-major.
    pub r: Vec<f64>,
}

impl CovForecast {
    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn corr(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.dim() + j]
    }

    /// `H = D R D`, row-major.
    pub fn h(&self) -> Vec<f64> {
        let n = self.dim();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = self.d[i] * self.r[i * n + j] * self.d[j];
            }
        }
        h
    }

    /// Covariance block of series `i` and `j`.
    pub fn pair(&self, i: usize, j: usize) -> PairCov {
        PairCov::from_sd(self.d[i], self.d[j], self.corr(i, j))
    }
}

/// 2 x 2 covariance block `[[var_x, cov], [cov, var_y]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCov {
    pub var_x: f64,
    pub cov: f64,
    pub var_y: f64,
}

impl PairCov {
    pub fn from_sd(sigma_x: f64, sigma_y: f64, rho: f64) -> Self {
        Self { var_x: sigma_x * sigma_x, cov: rho * sigma_x * sigma_y, var_y: sigma_y * sigma_y }
    }

    pub fn swap(&self) -> Self {
        Self { var_x: self.var_y, cov: self.cov, var_y: self.var_x }
    }

    pub fn sigma_x(&self) -> f64 {
        self.var_x.sqrt()
    }

    pub fn sigma_y(&self) -> f64 {
        self.var_y.sqrt()
    }

    pub fn rho(&self) -> f64 {
        (self.cov / (self.sigma_x() * self.sigma_y())).clamp(-1.0, 1.0)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.var_x > 0.0
            && self.var_y > 0.0
            && self.var_x.is_finite()
            && self.var_y.is_finite()
            && self.cov.is_finite()
            && self.var_x * self.var_y - self.cov * self.cov > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("covariance block {self:?} is not positive definite")))
        }
    }
}

// ---------------------------------------------------------------------------
// Recursion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Recursion {
    omega: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    alpha_q: f64,
    beta_q: f64,
    // Q_bar (1 - alpha_q - beta_q), row-major.
    q_intercept: Vec<f64>,
}

impl Recursion {
    fn new(p: &DccParams) -> Self {
        let w = 1.0 - p.alpha_q - p.beta_q;
        Self {
            omega: p.omega_g.clone(),
            alpha: p.alpha_g.clone(),
            beta: p.beta_g.clone(),
            alpha_q: p.alpha_q,
            beta_q: p.beta_q,
            q_intercept: p.q_bar.iter().flatten().map(|q| q * w).collect(),
        }
    }
}

/// DCC filter state: `D_t^2` and `Q_t` for the next observation.
///
/// Shared by the simulator and the forecaster so that both apply the same
/// recursion and initialization.
#[derive(Debug, Clone)]
pub struct DccFilter {
    dim: usize,
    d2: Vec<f64>,
    q: Vec<f64>,
    eps: Vec<f64>,
}

impl DccFilter {
    /// State at the first step: unconditional variances and `Q_0 = Q_bar`.
    pub fn new(params: &DccParams) -> Self {
        let dim = params.k_plus_1;
        let d2 = (0..dim).map(|i| params.omega_g[i] / (1.0 - params.alpha_g[i] - params.beta_g[i])).collect();
        let q = params.q_bar.iter().flatten().copied().collect();
        Self { dim, d2, q, eps: vec![0.0; dim] }
    }

    /// `(D_t, R_t)` of the upcoming observation.
    pub fn current(&self) -> CovForecast {
        let n = self.dim;
        let d = self.d2.iter().map(|v| v.sqrt()).collect();
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                r[i * n + j] =
                    if i == j { 1.0 } else { self.q[i * n + j] / (self.q[i * n + i] * self.q[j * n + j]).sqrt() };
            }
        }
        CovForecast { d, r }
    }

    /// Absorbs the realized `W_t` and moves to `t + 1` under `rec`.
    fn update_with(&mut self, w: &[f64], rec: &Recursion) {
        let n = self.dim;
        for i in 0..n {
            self.eps[i] = w[i] / self.d2[i].sqrt();
        }
        for i in 0..n {
            self.d2[i] = rec.omega[i] + rec.alpha[i] * w[i] * w[i] + rec.beta[i] * self.d2[i];
        }
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                self.q[idx] = rec.q_intercept[idx] + rec.alpha_q * self.eps[i] * self.eps[j] + rec.beta_q * self.q[idx];
            }
        }
    }

    /// Absorbs the realized `W_t` under the parameters `params`.
    pub fn update(&mut self, w: &[f64], params: &DccParams) {
        self.update_with(w, &Recursion::new(params));
    }
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// A simulated return panel with the true conditional moments of every
/// emitted observation.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    /// Emitted observations, `t = 1..n`.
    pub observations: Vec<ObservationRecord>,
    /// True `(D_t, R_t)` of each emitted observation.
    pub cov: Vec<CovForecast>,
    /// Discarded burn-in returns, oldest first.
    pub presample: Vec<Vec<f64>>,
}

/// Runs `burnin + n` steps of the DCC recursion and keeps the last `n`.
///
/// With a break, all `beta_g` components and `beta_q` switch to
/// `beta_post` for emitted times `t > t_star`.
pub fn simulate_dcc<R: Rng + ?Sized>(
    params: &DccParams,
    break_spec: Option<&BreakSpec>,
    n: usize,
    burnin: usize,
    rng: &mut R,
) -> Result<SimulatedPanel> {
    params.validate()?;
    let pre = Recursion::new(params);
    let post = match break_spec {
        Some(b) => {
            if b.t_star > n {
                return Err(Error::Parameter(format!("break time {} lies beyond the horizon {n}", b.t_star)));
            }
            Some((b.t_star, Recursion::new(&params.with_persistence(b.beta_post)?)))
        }
        None => None,
    };
    let dim = params.k_plus_1;
    let chi = if params.is_gaussian() {
        None
    } else {
        Some(ChiSquared::new(params.nu).map_err(|e| Error::Parameter(e.to_string()))?)
    };
    let unit_scale = if params.is_gaussian() { 1.0 } else { ((params.nu - 2.0) / params.nu).sqrt() };

    let mut filter = DccFilter::new(params);
    let mut observations = Vec::with_capacity(n);
    let mut cov_out = Vec::with_capacity(n);
    let mut presample = Vec::with_capacity(burnin);
    let mut z = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let total = burnin + n;
    for step in 0..total {
        let cov = filter.current();
        let l = cholesky(&cov.r, dim)
            .ok_or_else(|| Error::Numeric("conditional correlation lost positive definiteness".into()))?;
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let mix = match &chi {
            Some(c) => unit_scale / (c.sample(rng) / params.nu).sqrt(),
            None => 1.0,
        };
        for i in 0..dim {
            let mut e = 0.0;
            for j in 0..=i {
                e += l[i * dim + j] * z[j];
            }
            w[i] = cov.d[i] * e * mix;
        }
        // Time label of the observation just drawn and of the next one.
        let t = step as i64 - burnin as i64 + 1;
        if t >= 1 {
            observations.push(ObservationRecord { t, x: w[0], y: w[1..].to_vec() });
            cov_out.push(cov);
        } else {
            presample.push(w.clone());
        }
        let rec = match &post {
            Some((t_star, post_rec)) if t + 1 > *t_star as i64 => post_rec,
            _ => &pre,
        };
        filter.update_with(&w, rec);
    }
    Ok(SimulatedPanel { observations, cov: cov_out, presample })
}

// ---------------------------------------------------------------------------
// Univariate t
// ---------------------------------------------------------------------------

fn unit_scale(nu: f64) -> f64 {
    if nu.is_infinite() {
        1.0
    } else {
        ((nu - 2.0) / nu).sqrt()
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 2.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("degrees of freedom must exceed 2, got {nu}")))
    }
}

/// Upper tail `P(T > u)` of a classical t with `nu` degrees of freedom.
fn t_upper(u: f64, nu: f64) -> f64 {
    if nu.is_infinite() {
        return 0.5 * erfc(u / SQRT_2);
    }
    let half = 0.5 * beta_reg(0.5 * nu, 0.5, nu / (nu + u * u));
    if u > 0.0 {
        half
    } else {
        1.0 - half
    }
}

/// CDF of the t distribution; with `unit_variance` the argument is first
/// mapped to the classical scale.
pub fn student_t_cdf(x: f64, nu: f64, unit_variance: bool) -> Result<f64> {
    check_nu(nu)?;
    if x.is_nan() {
        return Err(Error::Input("t CDF of NaN".into()));
    }
    let u = if unit_variance { x / unit_scale(nu) } else { x };
    Ok(t_upper(-u, nu))
}

fn ln_t_density_const(nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
}

/// Quantile of the classical t (or the standard normal for `nu = inf`),
/// scaled by `sqrt((nu - 2)/nu)` when `unit_variance` is set.
pub fn student_t_quantile(p: f64, nu: f64, unit_variance: bool) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Input(format!("probability must lie in (0,1), got {p}")));
    }
    check_nu(nu)?;
    if p == 0.5 {
        return Ok(0.0);
    }
    let q = if nu.is_infinite() {
        Normal::standard().inverse_cdf(p)
    } else {
        let dist = StudentsT::new(0.0, 1.0, nu).map_err(|e| Error::Input(e.to_string()))?;
        let mut q = dist.inverse_cdf(p);
        // Newton polish against the CDF, working on the smaller tail.
        let c = ln_t_density_const(nu);
        for _ in 0..4 {
            let f = if p < 0.5 { t_upper(-q, nu) - p } else { (1.0 - p) - t_upper(q, nu) };
            let dens = (c - 0.5 * (nu + 1.0) * (1.0 + q * q / nu).ln()).exp();
            let step = f / dens;
            q -= step;
            if step.abs() <= 1e-15 * q.abs().max(1.0) {
                break;
            }
        }
        q
    };
    Ok(if unit_variance { q * unit_scale(nu) } else { q })
}

// ---------------------------------------------------------------------------
// Bivariate tail
// ---------------------------------------------------------------------------

/// `P(X > a, Y > b)` for a unit-variance bivariate t (Gaussian for
/// `nu = inf`) with correlation `rho`, by one-dimensional quadrature of
/// `f(x) P(Y > b | X = x)` over the larger of the two thresholds.
pub fn bivariate_t_upper_tail(a: f64, b: f64, rho: f64, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    if a.is_nan() || b.is_nan() {
        return Err(Error::Input("tail probability at NaN".into()));
    }
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Input(format!("correlation must lie in [-1,1], got {rho}")));
    }
    let s = unit_scale(nu);
    // Classical scale; integrate over the larger threshold.
    let (lo, hi) = if a >= b { (b / s, a / s) } else { (a / s, b / s) };
    if hi == f64::INFINITY || lo == f64::INFINITY {
        return Ok(0.0);
    }
    if rho == 1.0 {
        return Ok(t_upper(hi, nu));
    }
    if rho == -1.0 {
        // Y = -X: P(hi < X < -lo).
        return Ok((t_upper(hi, nu) - t_upper(-lo, nu)).max(0.0));
    }
    if hi == f64::NEG_INFINITY {
        return Ok(1.0);
    }
    if lo == f64::NEG_INFINITY {
        return Ok(t_upper(hi, nu));
    }
    if hi < 0.0 {
        // Most of the mass lies in the orthant; integrate the small
        // complementary lower orthant instead, which equals the upper
        // orthant of the reflected pair.
        let lower = bivariate_t_upper_tail(-a, -b, rho, nu)?;
        let value = lower + t_upper(lo, nu) + t_upper(hi, nu) - 1.0;
        return Ok(value.clamp(0.0, 1.0));
    }
    if lo < 0.0 {
        // P(X > hi) - P(X > hi, -Y >= -lo), again a small upper orthant.
        let cut = bivariate_t_upper_tail(hi * s, -lo * s, -rho, nu)?;
        return Ok((t_upper(hi, nu) - cut).clamp(0.0, 1.0));
    }
    let one_minus = 1.0 - rho * rho;
    let value = if nu.is_infinite() {
        let c = -0.5 * (2.0 * PI).ln();
        let sd = one_minus.sqrt();
        integrate_upper(
            |x| {
                let dens = (c - 0.5 * x * x).exp();
                if dens == 0.0 {
                    0.0
                } else {
                    dens * t_upper((lo - rho * x) / sd, nu)
                }
            },
            hi,
            QUAD_TOL,
        )?
    } else {
        let c = ln_t_density_const(nu);
        let nu1 = nu + 1.0;
        integrate_upper(
            |x| {
                let base = 1.0 + x * x / nu;
                let dens = (c - 0.5 * nu1 * base.ln()).exp();
                if dens == 0.0 {
                    return 0.0;
                }
                let u = (lo - rho * x) * (nu1 / ((nu + x * x) * one_minus)).sqrt();
                dens * t_upper(u, nu1)
            },
            hi,
            QUAD_TOL,
        )?
    };
    Ok(value.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Forecasts
// ---------------------------------------------------------------------------

/// VaR of the conditioning series and the systemic threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub var_hat: f64,
    pub sys_hat: f64,
}

/// Standardized CoVaR: the `c` solving
/// `P(X > q(beta), Y > c) = (1 - alpha)(1 - beta)` for a unit-variance pair.
pub fn standardized_covar(rho: f64, nu: f64, levels: &RiskLevels) -> Result<f64> {
    if !(levels.alpha > 0.0) {
        return Err(Error::Input("CoVaR forecasts need alpha > 0".into()));
    }
    let a = student_t_quantile(levels.beta, nu, true)?;
    let target = levels.joint_rate();
    let start = student_t_quantile(levels.alpha, nu, true)?;
    solve_decreasing(|c| Ok(bivariate_t_upper_tail(a, c, rho, nu)? - target), start, ROOT_FTOL)
}

/// `(VaR, CoVaR)` of `(X, Y)` with covariance block `h_pair`: the VaR is the
/// conditional standard deviation of `X` times the unit-variance quantile.
pub fn covar_forecast(h_pair: &PairCov, nu: f64, levels: &RiskLevels) -> Result<ThresholdPair> {
    h_pair.validate()?;
    let var_hat = h_pair.sigma_x() * student_t_quantile(levels.beta, nu, true)?;
    let sys_hat = h_pair.sigma_y() * standardized_covar(h_pair.rho(), nu, levels)?;
    Ok(ThresholdPair { var_hat, sys_hat })
}

/// Reverse CoVaR: [`covar_forecast`] with the two coordinates swapped, so
/// `var_hat` refers to `Y` and `sys_hat` to `X`.
pub fn rcovar_forecast(h_pair: &PairCov, nu: f64, levels: &RiskLevels) -> Result<ThresholdPair> {
    covar_forecast(&h_pair.swap(), nu, levels)
}

/// `(pit_x, pit_tail)`: the forecast CDF of `X` at `x` and the forecast CDF
/// of `Y` given `X > VaR` at `y`,
/// `1 - P(X > VaR, Y > y) / (1 - beta)`.
pub fn tail_pit(y: f64, x: f64, h_pair: &PairCov, nu: f64, levels: &RiskLevels) -> Result<(f64, f64)> {
    h_pair.validate()?;
    ensure_finite("x", x)?;
    if y.is_nan() {
        return Err(Error::Input("y must not be NaN".into()));
    }
    let pit_x = student_t_cdf(x / h_pair.sigma_x(), nu, true)?;
    let pit_tail = conditional_tail_cdf(y / h_pair.sigma_y(), h_pair.rho(), nu, levels)?;
    Ok((pit_x, pit_tail))
}

fn conditional_tail_cdf(y_std: f64, rho: f64, nu: f64, levels: &RiskLevels) -> Result<f64> {
    let a = student_t_quantile(levels.beta, nu, true)?;
    let joint = bivariate_t_upper_tail(a, y_std, rho, nu)?;
    Ok((1.0 - joint / (1.0 - levels.beta)).clamp(0.0, 1.0))
}

/// Piecewise Chebyshev interpolant of [`standardized_covar`] in
/// `z = atanh(rho)` for fixed `(nu, levels)`. Correlations outside the
/// table fall back to the exact solver.
#[derive(Debug, Clone)]
pub struct CovarTable {
    nu: f64,
    levels: RiskLevels,
    z_max: f64,
    width: f64,
    // pieces x (degree + 1) values at Chebyshev points of the second kind.
    nodes: Vec<f64>,
    values: Vec<f64>,
}

const TABLE_PIECES: usize = 32;
const TABLE_DEGREE: usize = 16;
const TABLE_Z_MAX: f64 = 3.8;

impl CovarTable {
    pub fn build(nu: f64, levels: RiskLevels) -> Result<Self> {
        check_nu(nu)?;
        let width = 2.0 * TABLE_Z_MAX / TABLE_PIECES as f64;
        let nodes: Vec<f64> = (0..=TABLE_DEGREE).map(|j| (PI * j as f64 / TABLE_DEGREE as f64).cos()).collect();
        let values = (0..TABLE_PIECES)
            .into_par_iter()
            .map(|p| {
                let mid = -TABLE_Z_MAX + (p as f64 + 0.5) * width;
                nodes
                    .iter()
                    .map(|&u| standardized_covar((mid + 0.5 * width * u).tanh(), nu, &levels))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<Vec<f64>>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(Self { nu, levels, z_max: TABLE_Z_MAX, width, nodes, values })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn levels(&self) -> RiskLevels {
        self.levels
    }

    pub fn eval(&self, rho: f64) -> Result<f64> {
        let z = rho.atanh();
        if !(z.abs() <= self.z_max) {
            return standardized_covar(rho, self.nu, &self.levels);
        }
        let piece = (((z + self.z_max) / self.width) as usize).min(TABLE_PIECES - 1);
        let mid = -self.z_max + (piece as f64 + 0.5) * self.width;
        let u = (z - mid) / (0.5 * self.width);
        let vals = &self.values[piece * (TABLE_DEGREE + 1)..(piece + 1) * (TABLE_DEGREE + 1)];
        let (mut num, mut den) = (0.0, 0.0);
        for (j, (&node, &v)) in self.nodes.iter().zip(vals).enumerate() {
            let diff = u - node;
            if diff == 0.0 {
                return Ok(v);
            }
            let mut w = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == TABLE_DEGREE {
                w *= 0.5;
            }
            let t = w / diff;
            num += t * v;
            den += t;
        }
        Ok(num / den)
    }
}

/// How conditional tail PITs are produced for CoES/MES forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailPolicy {
    /// Every tail PIT is computed.
    Always,
    /// Tail PITs are only computed when `pit_x > beta`; otherwise they do
    /// not enter the cumulative violation and are reported as 0.
    WhenExceeded,
}

/// Model-based forecaster for one measure with known parameters.
#[derive(Debug, Clone)]
pub struct Forecaster {
    measure: MeasureKind,
    levels: RiskLevels,
    nu: f64,
    var_quantile: f64,
    table: Option<CovarTable>,
    tail_policy: TailPolicy,
}

impl Forecaster {
    pub fn new(measure: MeasureKind, levels: RiskLevels, nu: f64) -> Result<Self> {
        levels.validate_for(measure)?;
        check_nu(nu)?;
        Ok(Self {
            measure,
            levels,
            nu,
            var_quantile: student_t_quantile(levels.beta, nu, true)?,
            table: None,
            tail_policy: TailPolicy::Always,
        })
    }

    /// Uses an interpolation table for standardized CoVaRs.
    pub fn with_table(mut self, table: CovarTable) -> Result<Self> {
        if table.nu != self.nu || table.levels != self.levels {
            return Err(Error::Config("CoVaR table was built for different levels or degrees of freedom".into()));
        }
        self.table = Some(table);
        Ok(self)
    }

    pub fn with_tail_policy(mut self, policy: TailPolicy) -> Self {
        self.tail_policy = policy;
        self
    }

    fn std_covar(&self, rho: f64) -> Result<f64> {
        match &self.table {
            Some(t) => t.eval(rho),
            None => standardized_covar(rho, self.nu, &self.levels),
        }
    }

    /// Forecast for the observation at `obs.t` given its conditional moments.
    /// Threshold measures ignore the realized values in `obs` apart from `K`.
    pub fn forecast(&self, cov: &CovForecast, obs: &ObservationRecord) -> Result<ForecastRecord> {
        let k = obs.y.len();
        if cov.dim() != k + 1 {
            return Err(Error::Input(format!("covariance forecast has dimension {}, expected {}", cov.dim(), k + 1)));
        }
        let payload = match self.measure {
            MeasureKind::CoVaR => {
                let var_hat = vec![cov.d[0] * self.var_quantile];
                let sys_hat = (1..=k).map(|j| Ok(cov.d[j] * self.std_covar(cov.corr(0, j))?)).collect::<Result<_>>()?;
                ForecastPayload::Thresholds { var_hat, sys_hat }
            }
            MeasureKind::RCoVaR => {
                let var_hat = (1..=k).map(|j| cov.d[j] * self.var_quantile).collect();
                let sys_hat = (1..=k).map(|j| Ok(cov.d[0] * self.std_covar(cov.corr(0, j))?)).collect::<Result<_>>()?;
                ForecastPayload::Thresholds { var_hat, sys_hat }
            }
            MeasureKind::CoES | MeasureKind::MES => {
                ensure_finite("x", obs.x)?;
                let pit_x = student_t_cdf(obs.x / cov.d[0], self.nu, true)?;
                let needed = self.tail_policy == TailPolicy::Always || pit_x > self.levels.beta;
                let pit_tail = (1..=k)
                    .map(|j| {
                        if needed {
                            conditional_tail_cdf(obs.y[j - 1] / cov.d[j], cov.corr(0, j), self.nu, &self.levels)
                        } else {
                            Ok(0.0)
                        }
                    })
                    .collect::<Result<_>>()?;
                ForecastPayload::Pits { pit_x, pit_tail }
            }
        };
        Ok(ForecastRecord { t: obs.t, payload })
    }
}

/// Forecasts for every observation of `history`, filtering the DCC
/// recursion forward with `params` (the pre-break parameters). The filter
/// starts at the unconditional state and first absorbs `presample`.
pub fn make_forecast_panel(
    params: &DccParams,
    history: &[ObservationRecord],
    presample: &[Vec<f64>],
    measure: MeasureKind,
    levels: RiskLevels,
) -> Result<Vec<ForecastRecord>> {
    let forecaster = Forecaster::new(measure, levels, params.nu)?;
    forecast_with(&forecaster, params, history, presample)
}

/// [`make_forecast_panel`] with a preconfigured forecaster.
pub fn forecast_with(
    forecaster: &Forecaster,
    params: &DccParams,
    history: &[ObservationRecord],
    presample: &[Vec<f64>],
) -> Result<Vec<ForecastRecord>> {
    params.validate()?;
    let dim = params.k_plus_1;
    let rec = Recursion::new(params);
    let mut filter = DccFilter::new(params);
    for w in presample {
        if w.len() != dim {
            return Err(Error::Input(format!("presample row has {} entries, expected {dim}", w.len())));
        }
        filter.update_with(w, &rec);
    }
    let mut out = Vec::with_capacity(history.len());
    let mut w = vec![0.0; dim];
    for obs in history {
        if obs.y.len() + 1 != dim {
            return Err(Error::Input(format!(
                "observation at t={} has {} series, parameters describe {dim}",
                obs.t,
                obs.y.len() + 1
            )));
        }
        out.push(forecaster.forecast(&filter.current(), obs)?);
        w[0] = obs.x;
        w[1..].copy_from_slice(&obs.y);
        filter.update_with(&w, &rec);
    }
    Ok(out)
}

/// Conditional moments of every observation of `history` under `params`.
pub fn filter_history(
    params: &DccParams,
    history: &[ObservationRecord],
    presample: &[Vec<f64>],
) -> Result<Vec<CovForecast>> {
    params.validate()?;
    let rec = Recursion::new(params);
    let mut filter = DccFilter::new(params);
    for w in presample {
        filter.update_with(w, &rec);
    }
    let mut out = Vec::with_capacity(history.len());
    for obs in history {
        out.push(filter.current());
        let mut w = Vec::with_capacity(params.k_plus_1);
        w.push(obs.x);
        w.extend_from_slice(&obs.y);
        filter.update_with(&w, &rec);
    }
    Ok(out)
}
