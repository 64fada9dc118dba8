//! Rényi-DP accounting for the sanitized-gradient mechanism.
//!
//! Chain of bounds:
//!
//! 1. After normalization with bound `C` each coordinate of a length-`n`
//!    gradient lies in `[-C, C]`, so the L2 sensitivity is `2C√n`.
//! 2. A Gaussian mechanism with sensitivity `S` and noise std `s` is
//!    `(λ, λS²/(2s²))`-RDP.
//! 3. RDP composes additively over the `B·T` teacher queries.
//! 4. `(λ, ε)`-RDP implies
//!    `(ε + log((λ−1)/λ) − (log δ + log λ)/(λ−1), δ)`-DP; the reported ε is
//!    the minimum over a grid of orders.
//!
//! Step 2 is instantiated two ways (see [`AccountingMode`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-query RDP cost is instantiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AccountingMode {
    /// `2C²nλ/σ²`, treating `σ` itself as the noise std.
    #[default]
    Absolute,
    /// `2nλ/σ²`: noise std taken as `σC`, which is what the mechanism adds.
    Consistent,
}

impl std::str::FromStr for AccountingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(AccountingMode::Absolute),
            "consistent" => Ok(AccountingMode::Consistent),
            other => Err(Error::invalid(format!(
                "unknown accounting mode `{other}` (absolute|consistent)"
            ))),
        }
    }
}

impl std::fmt::Display for AccountingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AccountingMode::Absolute => "absolute",
            AccountingMode::Consistent => "consistent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingParams {
    /// `C`
    pub norm_bound: f64,
    /// `n`, the length of the sanitized gradient (class count).
    pub classes: u64,
    /// `B`
    pub batch: u64,
    /// `T`
    pub iterations: u64,
    /// `σ`
    pub noise_scale: f64,
    pub delta: f64,
    pub mode: AccountingMode,
}

impl AccountingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.norm_bound > 0.0 && self.norm_bound.is_finite()) {
            return Err(Error::invalid(format!("C = {} must be positive", self.norm_bound)));
        }
        if self.classes == 0 {
            return Err(Error::invalid("gradient length n must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("sample size B must be positive"));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid(format!("σ = {} must be positive", self.noise_scale)));
        }
        check_delta(self.delta)
    }

    /// Total number of composed queries, `B·T`.
    pub fn queries(&self) -> u64 {
        self.batch.saturating_mul(self.iterations)
    }

    pub fn with_iterations(mut self, t: u64) -> Self {
        self.iterations = t;
        self
    }

    pub fn with_noise_scale(mut self, sigma: f64) -> Self {
        self.noise_scale = sigma;
        self
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("δ = {delta} must lie strictly inside (0, 1)")));
    }
    Ok(())
}

fn check_order(lambda: f64) -> Result<()> {
    if !(lambda > 1.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("RDP order λ = {lambda} must be > 1")));
    }
    Ok(())
}

/// L2 sensitivity `2C√n` of a normalized length-`n` gradient.
pub fn sensitivity(norm_bound: f64, n: u64) -> Result<f64> {
    if !(norm_bound > 0.0 && norm_bound.is_finite()) || n == 0 {
        return Err(Error::invalid(format!(
            "sensitivity needs C > 0 and n >= 1 (got C = {norm_bound}, n = {n})"
        )));
    }
    Ok(2.0 * norm_bound * (n as f64).sqrt())
}

/// Per-query RDP coefficient `ε_rdp(λ)/λ`; linear in `λ` for Gaussian noise.
pub fn rdp_coefficient(params: &AccountingParams) -> Result<f64> {
    params.validate()?;
    let s = sensitivity(params.norm_bound, params.classes)?;
    let noise_std = match params.mode {
        AccountingMode::Absolute => params.noise_scale,
        AccountingMode::Consistent => params.noise_scale * params.norm_bound,
    };
    Ok(s * s / (2.0 * noise_std * noise_std))
}

/// RDP of order `λ` spent by one query.
pub fn rdp_per_query(params: &AccountingParams, lambda: f64) -> Result<f64> {
    check_order(lambda)?;
    Ok(rdp_coefficient(params)? * lambda)
}

/// Linear composition over `B·T` queries.
pub fn compose(per_query: f64, batch: u64, iterations: u64) -> f64 {
    per_query * batch.saturating_mul(iterations) as f64
}

/// `(λ, ε_rdp)`-RDP to `(ε, δ)`-DP.
pub fn rdp_to_dp(eps_rdp: f64, lambda: f64, delta: f64) -> Result<f64> {
    check_order(lambda)?;
    check_delta(delta)?;
    if !(eps_rdp >= 0.0) {
        return Err(Error::Domain(format!("RDP ε = {eps_rdp} must be >= 0")));
    }
    Ok(eps_rdp + (-1.0 / lambda).ln_1p() - (delta.ln() + lambda.ln()) / (lambda - 1.0))
}

/// Interior points inserted into each coarse interval around the coarse
/// minimizer.
const FINE_POINTS: usize = 1024;

/// Grid of RDP orders to optimize over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    points: Vec<f64>,
    /// When set, a fine lattice is evaluated inside the two coarse intervals
    /// adjacent to the coarse minimizer.
    refine: bool,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::standard()
    }
}

impl LambdaGrid {
    /// `{1.5, 2, 3, …, 64, 128, 256, 512, 1024}` with fine refinement.
    pub fn standard() -> Self {
        let mut points = vec![1.5];
        points.extend((2..=64).map(f64::from));
        points.extend([128.0, 256.0, 512.0, 1024.0]);
        LambdaGrid {
            points,
            refine: true,
        }
    }

    /// A plain grid, evaluated exactly at the given orders.
    pub fn new(mut points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("λ grid is empty"));
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        if let Some(&bad) = points.iter().find(|&&l| !(l > 1.0 && l.is_finite())) {
            return Err(Error::invalid(format!("λ grid point {bad} must be > 1")));
        }
        Ok(LambdaGrid {
            points,
            refine: false,
        })
    }

    pub fn single(lambda: f64) -> Result<Self> {
        LambdaGrid::new(vec![lambda])
    }

    pub fn with_refinement(mut self, refine: bool) -> Self {
        self.refine = refine;
        self
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn refines(&self) -> bool {
        self.refine
    }

    /// Minimizes `f` over the grid; returns `(min, argmin)`.
    fn minimize(&self, f: impl Fn(f64) -> f64) -> (f64, f64) {
        let mut best = (f64::INFINITY, self.points[0]);
        let mut best_idx = 0;
        for (i, &l) in self.points.iter().enumerate() {
            let v = f(l);
            if v < best.0 {
                best = (v, l);
                best_idx = i;
            }
        }
        if self.refine {
            let lo = best_idx.saturating_sub(1);
            let hi = (best_idx + 1).min(self.points.len() - 1);
            for w in self.points[lo..=hi].windows(2) {
                let h = (w[1] - w[0]) / (FINE_POINTS + 1) as f64;
                for j in 1..=FINE_POINTS {
                    let l = w[0] + h * j as f64;
                    let v = f(l);
                    if v < best.0 {
                        best = (v, l);
                    }
                }
            }
        }
        best
    }
}

/// Result of converting accumulated RDP into an `(ε, δ)` statement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    /// Reported ε, never negative.
    pub epsilon: f64,
    /// Minimizing order; `None` when nothing was spent.
    pub lambda_star: Option<f64>,
    /// Set when the closed form dipped below zero and was clamped.
    pub clamped: bool,
}

impl EpsilonEstimate {
    pub const ZERO: EpsilonEstimate = EpsilonEstimate {
        epsilon: 0.0,
        lambda_star: None,
        clamped: false,
    };

    pub const UNBOUNDED: EpsilonEstimate = EpsilonEstimate {
        epsilon: f64::INFINITY,
        lambda_star: None,
        clamped: false,
    };
}

/// ε after `queries` queries with per-query coefficient `coef` (RDP = coef·λ).
fn epsilon_for_queries(coef: f64, queries: u64, delta: f64, grid: &LambdaGrid) -> EpsilonEstimate {
    if queries == 0 {
        return EpsilonEstimate::ZERO;
    }
    if !coef.is_finite() {
        return EpsilonEstimate::UNBOUNDED;
    }
    let q = queries as f64;
    let ln_delta = delta.ln();
    let (raw, lambda) = grid.minimize(|l| {
        coef * l * q + (-1.0 / l).ln_1p() - (ln_delta + l.ln()) / (l - 1.0)
    });
    EpsilonEstimate {
        epsilon: raw.max(0.0),
        lambda_star: Some(lambda),
        clamped: raw < 0.0,
    }
}

/// `min over λ ∈ grid` of the converted ε for `B·T` composed queries.
pub fn optimal_epsilon(params: &AccountingParams, grid: &LambdaGrid) -> Result<EpsilonEstimate> {
    let coef = rdp_coefficient(params)?;
    Ok(epsilon_for_queries(coef, params.queries(), params.delta, grid))
}

pub const SIGMA_SEARCH_LOWER: f64 = 1e-4;
pub const SIGMA_SEARCH_UPPER: f64 = 1e8;

/// Smallest `σ` (log-bisection over `[1e-4, 1e8]`) whose ε does not exceed
/// `target`. The `noise_scale` field of `params` is ignored.
pub fn calibrate_sigma(target: f64, params: &AccountingParams, grid: &LambdaGrid) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::invalid(format!("target ε = {target} must be positive")));
    }
    let eps = |sigma: f64| optimal_epsilon(&params.with_noise_scale(sigma), grid).map(|e| e.epsilon);
    if eps(SIGMA_SEARCH_LOWER)? <= target {
        return Ok(SIGMA_SEARCH_LOWER);
    }
    if eps(SIGMA_SEARCH_UPPER)? > target {
        return Err(Error::Infeasible(format!(
            "ε = {target} is unreachable even with σ = {SIGMA_SEARCH_UPPER:e}"
        )));
    }
    let (mut lo, mut hi) = (SIGMA_SEARCH_LOWER.ln(), SIGMA_SEARCH_UPPER.ln());
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if eps(mid.exp())? <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi.exp())
}

/// Iteration cap for [`max_iterations`].
pub const MAX_ITERATIONS_CAP: u64 = 1 << 52;

/// Largest `T` whose ε stays within `budget`. The `iterations` field of
/// `params` is ignored.
pub fn max_iterations(budget: f64, params: &AccountingParams, grid: &LambdaGrid) -> Result<u64> {
    if !(budget > 0.0) {
        return Err(Error::invalid(format!("budget ε = {budget} must be positive")));
    }
    let coef = rdp_coefficient(params)?;
    let fits = |t: u64| {
        let q = params.batch.saturating_mul(t);
        epsilon_for_queries(coef, q, params.delta, grid).epsilon <= budget
    };
    if !fits(1) {
        return Err(Error::Infeasible(format!(
            "a single iteration already exceeds ε = {budget}"
        )));
    }
    let mut lo = 1u64;
    let mut hi = 2u64;
    while fits(hi) {
        lo = hi;
        if hi >= MAX_ITERATIONS_CAP {
            return Ok(MAX_ITERATIONS_CAP);
        }
        hi = (hi * 2).min(MAX_ITERATIONS_CAP);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Running count of teacher queries for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub queries_composed: u64,
    /// `ε_rdp(λ)/λ` per query; infinite for a noiseless mechanism.
    pub per_query_rdp_coefficient: f64,
    pub lambda_grid: LambdaGrid,
    pub delta: f64,
}

impl PrivacyLedger {
    /// Ledger for a mechanism with the given bound, gradient length and noise.
    /// `noise_scale = 0` is allowed and yields an unbounded ε once any query
    /// is recorded.
    pub fn new(
        norm_bound: f64,
        classes: u64,
        noise_scale: f64,
        delta: f64,
        mode: AccountingMode,
        lambda_grid: LambdaGrid,
    ) -> Result<Self> {
        check_delta(delta)?;
        let per_query_rdp_coefficient = if noise_scale == 0.0 {
            sensitivity(norm_bound, classes)?;
            f64::INFINITY
        } else {
            rdp_coefficient(&AccountingParams {
                norm_bound,
                classes,
                batch: 1,
                iterations: 1,
                noise_scale,
                delta,
                mode,
            })?
        };
        Ok(PrivacyLedger {
            queries_composed: 0,
            per_query_rdp_coefficient,
            lambda_grid,
            delta,
        })
    }

    pub fn record(&mut self, queries: u64) {
        self.queries_composed = self.queries_composed.saturating_add(queries);
    }

    pub fn epsilon(&self) -> EpsilonEstimate {
        self.epsilon_after(0)
    }

    /// ε that would be reported after `extra` more queries.
    pub fn epsilon_after(&self, extra: u64) -> EpsilonEstimate {
        epsilon_for_queries(
            self.per_query_rdp_coefficient,
            self.queries_composed.saturating_add(extra),
            self.delta,
            &self.lambda_grid,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> AccountingParams {
        AccountingParams {
            norm_bound: 1e-3,
            classes: 10,
            batch: 256,
            iterations: 1,
            noise_scale: 100.0,
            delta: 1e-5,
            mode: AccountingMode::Absolute,
        }
    }

    #[test]
    fn sensitivity_values() {
        assert_eq!(sensitivity(1.0, 1).unwrap(), 2.0);
        assert_eq!(sensitivity(1.0, 4).unwrap(), 4.0);
        assert!((sensitivity(1e-3, 10).unwrap() - 6.324_555_320_336_759e-3).abs() < 1e-15);
        assert!(sensitivity(0.0, 1).is_err());
        assert!(sensitivity(1.0, 0).is_err());
    }

    #[test]
    fn per_query_values() {
        let p = AccountingParams {
            norm_bound: 1.0,
            classes: 1,
            noise_scale: 2.0,
            ..params()
        };
        assert!((rdp_per_query(&p, 2.0).unwrap() - 1.0).abs() < 1e-15);
        let v = rdp_per_query(&params(), 32.0).unwrap();
        assert!((v - 6.4e-8).abs() < 1e-20);
        assert!(matches!(rdp_per_query(&params(), 1.0), Err(Error::Domain(_))));
        let consistent = AccountingParams {
            mode: AccountingMode::Consistent,
            ..params()
        };
        // 2nλ/σ² = 2·10·32/10⁴
        assert!((rdp_per_query(&consistent, 32.0).unwrap() - 0.064).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for s in [1.0, 2.0, 10.0, 1e3, 1e6] {
            let v = rdp_per_query(&params().with_noise_scale(s), 4.0).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn composition() {
        assert_eq!(compose(6.4e-8, 256, 0), 0.0);
        assert!((compose(6.4e-8, 256, 1) - 1.6384e-5).abs() < 1e-18);
        assert_eq!(compose(0.37, 5, 14), 2.0 * compose(0.37, 5, 7));
    }

    #[test]
    fn conversion_golden_value() {
        let v = rdp_to_dp(1.6384e-5, 32.0, 1e-5).unwrap();
        assert!((v - 0.227_854_445_755_435_9).abs() < 1e-13, "{v}");
        assert!(matches!(rdp_to_dp(0.1, 2.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(rdp_to_dp(0.1, 0.5, 0.1), Err(Error::Domain(_))));
        assert!(matches!(rdp_to_dp(-0.1, 2.0, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn conversion_with_nothing_spent() {
        let mut last = f64::INFINITY;
        for l in [2.0, 4.0, 16.0, 64.0, 256.0] {
            let v = rdp_to_dp(0.0, l, 1e-5).unwrap();
            assert!(v < last && v > 0.0);
            last = v;
        }
        // Very large orders push the closed form below zero.
        assert!(rdp_to_dp(0.0, 1e6, 1e-5).unwrap() < 0.0);
    }

    #[test]
    fn single_point_grid_matches_closed_form() {
        let e = optimal_epsilon(&params(), &LambdaGrid::single(32.0).unwrap()).unwrap();
        assert!((e.epsilon - rdp_to_dp(1.6384e-5, 32.0, 1e-5).unwrap()).abs() < 1e-15);
        assert_eq!(e.lambda_star, Some(32.0));
        assert!(LambdaGrid::new(vec![]).is_err());
        assert!(LambdaGrid::new(vec![1.0]).is_err());
    }

    #[test]
    fn zero_iterations_spend_nothing() {
        let e = optimal_epsilon(&params().with_iterations(0), &LambdaGrid::standard()).unwrap();
        assert_eq!(e, EpsilonEstimate::ZERO);
    }

    #[test]
    fn ledger_tracks_queries() {
        let mut l = PrivacyLedger::new(1e-3, 10, 100.0, 1e-5, AccountingMode::Absolute, LambdaGrid::standard())
            .unwrap();
        assert_eq!(l.epsilon(), EpsilonEstimate::ZERO);
        l.record(256);
        let direct = optimal_epsilon(&params(), &LambdaGrid::standard()).unwrap();
        assert_eq!(l.epsilon(), direct);
        assert!(l.epsilon_after(256).epsilon > direct.epsilon);
        let noiseless =
            PrivacyLedger::new(1.0, 3, 0.0, 1e-5, AccountingMode::Absolute, LambdaGrid::standard()).unwrap();
        assert_eq!(noiseless.epsilon_after(1).epsilon, f64::INFINITY);
    }

    #[test]
    fn calibration_and_iteration_search() {
        let grid = LambdaGrid::standard();
        let p = AccountingParams {
            norm_bound: 1.0,
            classes: 3,
            batch: 16,
            iterations: 100,
            noise_scale: 1.0,
            delta: 1e-5,
            mode: AccountingMode::Consistent,
        };
        let sigma = calibrate_sigma(2.0, &p, &grid).unwrap();
        assert!(optimal_epsilon(&p.with_noise_scale(sigma), &grid).unwrap().epsilon <= 2.0);
        assert!(optimal_epsilon(&p.with_noise_scale(sigma * (1.0 - 1e-4)), &grid).unwrap().epsilon > 2.0);
        assert_eq!(calibrate_sigma(1e14, &p, &grid).unwrap(), SIGMA_SEARCH_LOWER);
        assert!(matches!(calibrate_sigma(1e-6, &p, &grid), Err(Error::Infeasible(_))));

        let t = max_iterations(2.0, &p.with_noise_scale(50.0), &grid).unwrap();
        let eps = |t| optimal_epsilon(&p.with_noise_scale(50.0).with_iterations(t), &grid).unwrap().epsilon;
        assert!(eps(t) <= 2.0 && eps(t + 1) > 2.0);
        assert!(matches!(
            max_iterations(1e-3, &p, &grid),
            Err(Error::Infeasible(_))
        ));
    }
}
