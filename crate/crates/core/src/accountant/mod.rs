//! Rényi-DP accounting for DP-SGD with Poisson subsampling.
//!
//! A run with noise multiplier `σ`, sampling probability `q` and `S` steps is
//! summarized by its per-step RDP curve `g_α(σ, q)` over a grid of orders.
//! Composition multiplies the curve by `S`, and the best order is chosen when
//! converting to `(ε, δ)`.

mod quadrature;
mod rdp;

pub use quadrature::{integrate, QuadratureConfig};
pub use rdp::{
    rdp_gaussian, rdp_subsampled_gaussian_int, rdp_subsampled_gaussian_real, rdp_subsampled_gaussian_real_with,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a subsampled-Gaussian DP-SGD run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    pub delta: f64,
}

impl MechanismParams {
    pub fn new(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidArgument(format!("q must lie in (0, 1], got {q}")));
        }
        check_delta(delta)?;
        Ok(Self { sigma, q, steps, delta })
    }

    /// Sampling probability `B/N` with the `δ = 1/N` convention.
    pub fn from_batch(sigma: f64, batch: f64, dataset_size: f64, steps: u64) -> Result<Self> {
        if !(batch > 0.0 && batch <= dataset_size) {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch} must lie in (0, dataset size {dataset_size}]"
            )));
        }
        Self::new(sigma, batch / dataset_size, steps, default_delta(dataset_size)?)
    }
}

/// The `δ = 1/N` convention.
pub fn default_delta(dataset_size: f64) -> Result<f64> {
    if dataset_size > 1.0 {
        Ok(1.0 / dataset_size)
    } else {
        Err(Error::InvalidArgument(format!("dataset size must exceed 1, got {dataset_size}")))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// One point of an RDP curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpPoint {
    pub alpha: f64,
    pub eps: f64,
}

/// Per-step RDP values over strictly increasing orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    points: Vec<RdpPoint>,
    /// Orders dropped because their evaluation failed, with the reason.
    #[serde(default)]
    skipped: Vec<(f64, String)>,
}

impl RdpCurve {
    pub fn new(points: Vec<RdpPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCurve("no points".into()));
        }
        for w in points.windows(2) {
            if !(w[1].alpha > w[0].alpha) {
                return Err(Error::InvalidArgument("curve orders must be strictly increasing".into()));
            }
        }
        for p in &points {
            if !(p.alpha > 1.0) {
                return Err(Error::InvalidArgument(format!("order {} must exceed 1", p.alpha)));
            }
            if !(p.eps >= 0.0 && p.eps.is_finite()) {
                return Err(Error::InvalidArgument(format!("RDP value {} at order {} is invalid", p.eps, p.alpha)));
            }
        }
        Ok(Self {
            points,
            skipped: Vec::new(),
        })
    }

    pub fn points(&self) -> &[RdpPoint] {
        &self.points
    }

    pub fn skipped(&self) -> &[(f64, String)] {
        &self.skipped
    }

    /// The curve of `steps`-fold composition.
    pub fn scaled(&self, steps: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| RdpPoint {
                    alpha: p.alpha,
                    eps: p.eps * steps,
                })
                .collect(),
            skipped: self.skipped.clone(),
        }
    }
}

/// An `(ε, δ)` guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
}

/// Result of an RDP to `(ε, δ)` conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub spec: PrivacySpec,
    /// Order attaining the minimum.
    pub best_alpha: f64,
}

/// How a composed RDP curve is turned into `(ε, δ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conversion {
    /// `ε = min_α S·g_α + log(1/δ)/(α−1)`.
    Classic,
    /// `ε = min_α S·g_α + log((α−1)/α) − (log δ + log α)/(α−1)`, the
    /// refinement used by common DP-SGD accountants. Never larger than
    /// [`Conversion::Classic`].
    #[default]
    Improved,
}

impl Conversion {
    fn epsilon(self, composed: f64, alpha: f64, delta: f64) -> f64 {
        match self {
            Conversion::Classic => composed + (1.0 / delta).ln() / (alpha - 1.0),
            Conversion::Improved => {
                composed + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0)
            }
        }
    }
}

impl std::str::FromStr for Conversion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(Conversion::Classic),
            "improved" => Ok(Conversion::Improved),
            other => Err(Error::InvalidArgument(format!(
                "unknown conversion {other:?} (expected \"classic\" or \"improved\")"
            ))),
        }
    }
}

impl std::fmt::Display for Conversion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conversion::Classic => "classic",
            Conversion::Improved => "improved",
        })
    }
}

/// Default grid: quarter steps on (1, 5], every integer up to 64, then 128 and 256.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (1..=16).map(|i| 1.0 + 0.25 * f64::from(i)).collect();
    grid.extend((6..=64).map(f64::from));
    grid.extend([128.0, 256.0]);
    grid
}

/// Result of [`Accountant::solve_steps`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepsSolution {
    pub steps: u64,
    /// True when the budget admits more than the configured step cap.
    pub capped: bool,
}

/// Configured accountant. All methods are pure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Accountant {
    pub alpha_grid: Vec<f64>,
    pub conversion: Conversion,
    /// Search bracket for [`Accountant::solve_sigma`].
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Relative tolerance on σ.
    pub sigma_rel_tol: f64,
    pub max_steps: u64,
}

impl Default for Accountant {
    fn default() -> Self {
        Self {
            alpha_grid: default_alpha_grid(),
            conversion: Conversion::default(),
            sigma_min: 0.05,
            sigma_max: 1e3,
            sigma_rel_tol: 1e-4,
            max_steps: 1 << 40,
        }
    }
}

impl Accountant {
    pub fn with_conversion(conversion: Conversion) -> Self {
        Self {
            conversion,
            ..Self::default()
        }
    }

    pub fn build_curve(&self, sigma: f64, q: f64) -> Result<RdpCurve> {
        build_curve(sigma, q, &self.alpha_grid)
    }

    /// Converts a per-step curve composed over `steps` steps.
    pub fn to_epsilon(&self, curve: &RdpCurve, steps: u64, delta: f64) -> Result<EpsilonReport> {
        check_delta(delta)?;
        let s = steps as f64;
        let mut best = EpsilonReport {
            spec: PrivacySpec {
                epsilon: f64::INFINITY,
                delta,
            },
            best_alpha: f64::NAN,
        };
        for p in curve.points() {
            let eps = self.conversion.epsilon(s * p.eps, p.alpha, delta);
            if eps < best.spec.epsilon {
                best.spec.epsilon = eps;
                best.best_alpha = p.alpha;
            }
        }
        best.spec.epsilon = best.spec.epsilon.max(0.0);
        Ok(best)
    }

    pub fn epsilon(&self, params: &MechanismParams) -> Result<EpsilonReport> {
        let curve = self.build_curve(params.sigma, params.q)?;
        self.to_epsilon(&curve, params.steps, params.delta)
    }

    fn epsilon_or_inf(&self, sigma: f64, q: f64, steps: u64, delta: f64) -> Result<f64> {
        match self.build_curve(sigma, q) {
            Ok(curve) => Ok(self.to_epsilon(&curve, steps, delta)?.spec.epsilon),
            Err(Error::EmptyCurve(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    /// Smallest σ in the search bracket whose ε does not exceed `target_eps`.
    ///
    /// Bisects in log σ; ε is strictly decreasing in σ. The returned value
    /// always satisfies the target.
    pub fn solve_sigma(&self, target_eps: f64, q: f64, steps: u64, delta: f64) -> Result<f64> {
        if !(target_eps > 0.0) {
            return Err(Error::InvalidArgument(format!("target epsilon must be positive, got {target_eps}")));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidArgument(format!("q must lie in (0, 1], got {q}")));
        }
        check_delta(delta)?;
        let mut hi = self.sigma_max;
        if self.epsilon_or_inf(hi, q, steps, delta)? > target_eps {
            return Err(Error::Bracket(format!(
                "epsilon {target_eps} is unattainable even at sigma = {hi}"
            )));
        }
        let mut lo = self.sigma_min;
        if self.epsilon_or_inf(lo, q, steps, delta)? <= target_eps {
            return Ok(lo);
        }
        while hi / lo - 1.0 > self.sigma_rel_tol {
            let mid = (lo * hi).sqrt();
            if self.epsilon_or_inf(mid, q, steps, delta)? <= target_eps {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// Largest step count whose ε does not exceed `target_eps`, by doubling
    /// and binary search. Zero when a single step already exceeds it.
    pub fn solve_steps(&self, target_eps: f64, q: f64, sigma: f64, delta: f64) -> Result<StepsSolution> {
        check_delta(delta)?;
        let curve = self.build_curve(sigma, q)?;
        let eps_at = |s: u64| -> Result<f64> { Ok(self.to_epsilon(&curve, s, delta)?.spec.epsilon) };
        if eps_at(1)? > target_eps {
            return Ok(StepsSolution { steps: 0, capped: false });
        }
        let mut good = 1u64;
        let mut bad = loop {
            let next = good.saturating_mul(2).min(self.max_steps);
            if next == good {
                return Ok(StepsSolution {
                    steps: good,
                    capped: true,
                });
            }
            if eps_at(next)? > target_eps {
                break next;
            }
            good = next;
        };
        while bad - good > 1 {
            let mid = good + (bad - good) / 2;
            if eps_at(mid)? <= target_eps {
                good = mid;
            } else {
                bad = mid;
            }
        }
        Ok(StepsSolution {
            steps: good,
            capped: false,
        })
    }
}

/// Evaluates `g_α(σ, q)` on every order of `grid`: the binomial closed form
/// for integral orders, quadrature otherwise. Orders whose evaluation fails
/// are skipped with a warning; it is an error only if all fail.
pub fn build_curve(sigma: f64, q: f64, grid: &[f64]) -> Result<RdpCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty order grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut points = Vec::with_capacity(grid.len());
    let mut skipped = Vec::new();
    for &alpha in &grid {
        let value = if alpha.fract() == 0.0 && alpha >= 2.0 && alpha <= f64::from(u32::MAX) {
            rdp_subsampled_gaussian_int(alpha as u32, sigma, q)
        } else {
            rdp_subsampled_gaussian_real(alpha, sigma, q)
        };
        match value {
            Ok(eps) if eps.is_finite() => points.push(RdpPoint { alpha, eps: eps.max(0.0) }),
            Ok(eps) => skipped.push((alpha, format!("non-finite value {eps}"))),
            Err(e @ (Error::Domain(_) | Error::InvalidArgument(_))) => return Err(e),
            Err(e) => {
                log::warn!("skipping order {alpha}: {e}");
                skipped.push((alpha, e.to_string()));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCurve(format!(
            "all {} orders failed at sigma = {sigma}, q = {q}",
            grid.len()
        )));
    }
    let mut curve = RdpCurve::new(points)?;
    curve.skipped = skipped;
    Ok(curve)
}
