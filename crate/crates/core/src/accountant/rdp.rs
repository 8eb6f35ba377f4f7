//! Per-step Rényi-DP of the Poisson-subsampled Gaussian mechanism.
//!
//! Both routes evaluate `D_α((1−q)·N(0,σ²) + q·N(1,σ²) ‖ N(0,σ²))`. They
//! share one reformulation: writing the likelihood ratio as `1 + u(x)` with
//! `u(x) = q·(exp((2x−1)/(2σ²)) − 1)`, the first-order term `α·u` integrates to
//! zero under `N(0,σ²)`, so
//!
//! ```text
//! exp((α−1)·D_α) = 1 + E,    E = E_{x~N(0,σ²)}[(1+u)^α − 1 − α·u] ≥ 0.
//! ```
//!
//! Working with `E` directly keeps full relative precision when the
//! divergence is tiny (small `q`), and working with `log E` avoids overflow
//! when it is huge (small `σ`, large `α`).

use super::quadrature::{integrate, QuadratureConfig};
use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("noise multiplier must be positive and finite, got {sigma}")))
    }
}

fn check_q(q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::Domain(format!("sampling probability must lie in [0, 1], got {q}")))
    }
}

/// `ln(1 + e^x)` without overflow.
fn ln1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(e^z − 1)` for `z > 0`.
fn ln_expm1(z: f64) -> f64 {
    if z > 35.0 {
        z + (-(-z).exp()).ln_1p()
    } else {
        z.exp_m1().ln()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Maps `log E` to the divergence `ln(1 + E) / (α − 1)`.
fn finish(log_excess: f64, alpha: f64) -> Result<f64> {
    if log_excess.is_nan() || log_excess == f64::INFINITY {
        return Err(Error::Overflow(format!(
            "Rényi divergence of order {alpha} is not representable; the noise multiplier is too small"
        )));
    }
    Ok(ln1p_exp(log_excess) / (alpha - 1.0))
}

/// Rényi divergence of the Gaussian mechanism without subsampling,
/// `α / (2σ²)`.
pub fn rdp_gaussian(alpha: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Domain(format!("Rényi order must exceed 1, got {alpha}")));
    }
    check_sigma(sigma)?;
    Ok(alpha / (2.0 * sigma * sigma))
}

/// Binomial closed form for integer orders.
///
/// `exp((α−1)·g_α) = Σ_k C(α,k) (1−q)^{α−k} q^k exp(k(k−1)/(2σ²))`; the
/// `k = 0, 1` terms combine with the leading `1` so only `k ≥ 2` enters the
/// log-sum-exp.
pub fn rdp_subsampled_gaussian_int(alpha: u32, sigma: f64, q: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::Domain(format!("integer Rényi order must be at least 2, got {alpha}")));
    }
    check_sigma(sigma)?;
    check_q(q)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let a = f64::from(alpha);
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);

    // ln C(α, k), advanced incrementally
    let mut ln_binom = a.ln() + (a - 1.0).ln() - std::f64::consts::LN_2;
    let mut terms = Vec::with_capacity(alpha as usize);
    for k in 2..=alpha {
        let kf = f64::from(k);
        if k > 2 {
            ln_binom += ((a - kf + 1.0) / kf).ln();
        }
        let rest = if k == alpha { 0.0 } else { (a - kf) * ln_1mq };
        terms.push(ln_binom + rest + kf * ln_q + ln_expm1(kf * (kf - 1.0) * inv_two_var));
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if !max.is_finite() {
        return Err(Error::Overflow(format!(
            "binomial expansion of order {alpha} overflows at sigma = {sigma}"
        )));
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    finish(max + sum.ln(), a)
}

/// The integrand `log(φ_σ(x) · [(1+u)^α − 1 − α·u])`.
struct LogIntegrand {
    alpha: f64,
    q: f64,
    ln_q: f64,
    ln_1mq: f64,
    inv_two_var: f64,
    log_norm: f64,
}

impl LogIntegrand {
    fn new(alpha: f64, sigma: f64, q: f64) -> Self {
        Self {
            alpha,
            q,
            ln_q: q.ln(),
            ln_1mq: (-q).ln_1p(),
            inv_two_var: 1.0 / (2.0 * sigma * sigma),
            log_norm: sigma.ln() + LN_SQRT_2PI,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let alpha = self.alpha;
        let c = (2.0 * x - 1.0) * self.inv_two_var;
        let log_phi = -x * x * self.inv_two_var - self.log_norm;
        let u = self.q * c.exp_m1();
        let log_h = if u.is_finite() && u.abs() < 0.1 {
            // Σ_{j≥2} C(α, j) u^j
            let mut term = alpha * u;
            let mut sum = 0.0;
            for j in 2..80 {
                let jf = j as f64;
                term *= (alpha - jf + 1.0) / jf * u;
                sum += term;
                if term.abs() <= 1e-18 * sum.abs() {
                    break;
                }
            }
            if sum > 0.0 {
                sum.ln()
            } else {
                f64::NEG_INFINITY
            }
        } else {
            // ln(1 + u) = logaddexp(ln(1−q), ln q + c) stays finite when u overflows
            let log_ratio = if self.ln_1mq == f64::NEG_INFINITY {
                self.ln_q + c
            } else {
                log_add_exp(self.ln_1mq, self.ln_q + c)
            };
            let big_l = alpha * log_ratio;
            if big_l > 1.0 {
                let ln_lin = if u.is_finite() && u < 1e300 {
                    (alpha * u).ln_1p()
                } else {
                    alpha.ln() + self.ln_q + c
                };
                big_l + (-(ln_lin - big_l).exp()).ln_1p()
            } else {
                let h = big_l.exp_m1() - alpha * u;
                if h > 0.0 {
                    h.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        };
        log_phi + log_h
    }
}

fn golden_max<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> f64 {
    let ratio = 0.618_033_988_749_894_9;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..80 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        }
    }
    if f1 > f2 {
        x1
    } else {
        x2
    }
}

/// Real-order divergence by adaptive quadrature of the shifted log-domain
/// integrand over the real line.
pub fn rdp_subsampled_gaussian_real(alpha: f64, sigma: f64, q: f64) -> Result<f64> {
    rdp_subsampled_gaussian_real_with(alpha, sigma, q, &QuadratureConfig::default())
}

pub fn rdp_subsampled_gaussian_real_with(alpha: f64, sigma: f64, q: f64, cfg: &QuadratureConfig) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("Rényi order must exceed 1, got {alpha}")));
    }
    check_sigma(sigma)?;
    check_q(q)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return rdp_gaussian(alpha, sigma);
    }
    let li = LogIntegrand::new(alpha, sigma, q);
    if !li.inv_two_var.is_finite() {
        return Err(Error::Overflow(format!("sigma = {sigma} is too small to evaluate order {alpha}")));
    }
    let f = |x: f64| li.eval(x);

    // Locate the global maximum: a coarse scan plus the analytic location of
    // the right-hand hump, refined by golden section.
    let scan_lo = -4.0 * sigma - 1.0;
    let scan_hi = alpha + 4.0 * sigma + 1.0;
    let n_scan = 400;
    let step = (scan_hi - scan_lo) / n_scan as f64;
    let mut candidates: Vec<f64> = (0..=n_scan).map(|i| scan_lo + step * i as f64).collect();
    candidates.extend([alpha, 0.0, 1.0]);
    let best = candidates
        .iter()
        .copied()
        .max_by(|a, b| f(*a).total_cmp(&f(*b)))
        .expect("nonempty scan");
    let width = step.max(sigma);
    let mode = golden_max(&f, best - width, best + width);
    let mode = if f(mode) >= f(best) { mode } else { best };
    let peak = f(mode);
    if !peak.is_finite() {
        return Err(Error::Overflow(format!("integrand is not finite at order {alpha}, sigma {sigma}")));
    }

    // Extend the limits until the shifted integrand underflows.
    let cutoff = peak - 745.0;
    let mut lo = mode.min(0.0) - 10.0 * sigma;
    let mut hi = mode.max(alpha) + 10.0 * sigma;
    for _ in 0..10_000 {
        if f(lo) < cutoff {
            break;
        }
        lo -= 2.0 * sigma;
    }
    for _ in 0..10_000 {
        if f(hi) < cutoff {
            break;
        }
        hi += 2.0 * sigma;
    }

    let mut breaks = vec![lo, hi, 0.5, alpha, mode];
    for k in [1.0, 4.0] {
        breaks.push(mode - k * sigma);
        breaks.push(mode + k * sigma);
    }
    breaks.retain(|x| *x >= lo && *x <= hi);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let (integral, _) = integrate(|x| (f(x) - peak).exp(), &breaks, cfg)?;
    if !(integral > 0.0) {
        return Ok(0.0);
    }
    finish(peak + integral.ln(), alpha)
}
