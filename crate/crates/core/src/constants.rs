//! Well-posedness constants for Type-I and Type-II backward stochastic
//! Volterra integral equations with jumps.
//!
//! All quantities are scalar functions of a weight parameter `beta` and a
//! uniform bound `frak_f` on the jumps of the clock process. Smallness of
//! these constants is what makes the fixed-point solvers contract, so the
//! numerical values here gate everything downstream.

use serde::Serialize;

use crate::error::{Error, Result};

/// Below this value the jump bound is treated as zero and the analytic
/// continuous-clock limits are used instead of the 0/0-prone general forms.
const FRAK_F_SWITCH: f64 = 1e-8;

/// Uniform bound on the jumps of the clock process `A`.
///
/// `0.0` encodes a continuous clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpBound(f64);

impl JumpBound {
    pub const ZERO: JumpBound = JumpBound(0.0);

    pub fn new(frak_f: f64) -> Result<Self> {
        if !frak_f.is_finite() || frak_f < 0.0 {
            return Err(Error::Domain(format!(
                "jump bound must be finite and nonnegative, got {frak_f}"
            )));
        }
        Ok(JumpBound(frak_f))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// True when the bound is small enough that the continuous-clock
    /// closed forms are used.
    pub fn is_effectively_zero(self) -> bool {
        self.0 < FRAK_F_SWITCH
    }
}

/// The full set of well-posedness constants at a given `(beta, frak_f)`,
/// together with the admissibility flags for the three solver regimes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WellPosednessConstants {
    pub beta: f64,
    pub frak_f: f64,
    pub delta_star: f64,
    pub kappa: f64,
    pub big_m: f64,
    /// `2M/(1-2M)`; `None` when `M >= 1/2`.
    pub sigma: Option<f64>,
    /// `sigma * e^{(beta-delta*) frak_f} / (beta-delta*)`; `None` when `M >= 1/2`.
    pub sigma_tilde: Option<f64>,
    /// Value of the Type-II condition `(16 + e^{(b-d)f}/(b-d)) * sigma`.
    pub type2_value: Option<f64>,
    pub type1_ok: bool,
    pub type1_noy_ok: bool,
    pub type2_ok: bool,
}

/// Admissibility condition selector for [`min_beta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Type1,
    Type1NoY,
    Type2,
}

impl Condition {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(Condition::Type1),
            "type1_noY" | "type1-noy" | "type1_noy" => Ok(Condition::Type1NoY),
            "type2" => Ok(Condition::Type2),
            other => Err(Error::Invalid(format!("unknown condition `{other}`"))),
        }
    }
}

/// `Pi^f(gamma, delta) = 11/delta + 9 e^{(gamma-delta) f}/(gamma-delta)`.
pub fn eval_pi(gamma: f64, delta: f64, frak_f: JumpBound) -> Result<f64> {
    if !(delta > 0.0 && delta < gamma) {
        return Err(Error::Domain(format!(
            "eval_pi requires 0 < delta < gamma, got delta={delta}, gamma={gamma}"
        )));
    }
    let w = gamma - delta;
    Ok(11.0 / delta + 9.0 * (w * frak_f.0).exp() / w)
}

/// `kappa^f(delta)`, the contraction constant of the underlying BSDE.
///
/// For `frak_f` below the switch threshold the analytic limit
/// `9/delta + 4(2+9 delta)/delta^2` is used; the general expression has a
/// 0/0 denominator at `frak_f = 0`.
pub fn eval_kappa(delta: f64, frak_f: JumpBound) -> Result<f64> {
    if delta <= 0.0 {
        return Err(Error::Domain(format!(
            "eval_kappa requires delta > 0, got {delta}"
        )));
    }
    if frak_f.is_effectively_zero() {
        return Ok(9.0 / delta + 4.0 * (2.0 + 9.0 * delta) / (delta * delta));
    }
    let f = frak_f.0;
    let df2 = delta * delta * f * f;
    let root = (df2 + 4.0).sqrt();
    // root - 2 rewritten as df2 / (root + 2) to avoid cancellation for
    // small delta * f.
    let root_minus_2 = df2 / (root + 2.0);
    Ok(9.0 / delta
        + f * f * (2.0 + 9.0 * delta) / root_minus_2 * ((delta * f - root_minus_2) / 2.0).exp())
}

/// Residual of the first-order condition defining `delta*`, in the
/// variable `w = beta - x`. The root equation is
/// `11 w^2 - 9 e^{w f} (beta-w)^2 (1 - f w) = 0`.
fn delta_star_residual(w: f64, beta: f64, f: f64) -> f64 {
    let x = beta - w;
    11.0 * w * w - 9.0 * (w * f).exp() * x * x * (1.0 - f * w)
}

/// Solves for `delta*(beta)`, the minimizer of `delta -> Pi^f(beta, delta)`.
///
/// The root lives in `((beta - 1/f)^+, beta)`; the search is parametrized by
/// `w = beta - x` so that precision does not degrade when `x` is close to
/// `beta`. Bracketed bisection, then secant polish.
pub fn solve_delta_star(beta: f64, frak_f: JumpBound) -> Result<f64> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::Domain(format!(
            "solve_delta_star requires beta > 0, got {beta}"
        )));
    }
    let f = frak_f.0;
    // w ranges over (0, min(beta, 1/f)).
    let w_hi = if f > 0.0 { beta.min(1.0 / f) } else { beta };
    let eps = 1e-12 * w_hi;
    let (mut lo, mut hi) = (eps, w_hi - eps);
    let (mut g_lo, g_hi) = (
        delta_star_residual(lo, beta, f),
        delta_star_residual(hi, beta, f),
    );
    if g_lo.signum() == g_hi.signum() {
        // For beta far above 1/f the root is squeezed against w = 1/f and
        // the factor (1 - f w) cancels below float resolution, flipping
        // the endpoint sign. The limit value of the residual at w = 1/f
        // is 11 w^2 > 0, so the crossing sits within eps of the endpoint.
        if f > 0.0 && w_hi < beta && g_lo < 0.0 {
            return Ok(beta - hi);
        }
        return Err(Error::Convergence(format!(
            "delta* bracket does not change sign for beta={beta}, frak_f={f}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = delta_star_residual(mid, beta, f);
        if g_mid == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    // Secant polish inside the final bracket.
    let mut w = 0.5 * (lo + hi);
    for _ in 0..4 {
        let h = (hi - lo).max(1e-9 * w_hi) * 1e-3;
        let g = delta_star_residual(w, beta, f);
        let dg = (delta_star_residual(w + h, beta, f) - delta_star_residual(w - h, beta, f))
            / (2.0 * h);
        if dg == 0.0 {
            break;
        }
        let next = w - g / dg;
        if next > lo && next < hi {
            w = next;
        }
    }
    Ok(beta - w)
}

/// `M^f(beta) = Pi^f(beta, delta*(beta))`, the infimum of `Pi` over the
/// admissible `(gamma, delta)` wedge.
pub fn eval_m(beta: f64, frak_f: JumpBound) -> Result<f64> {
    let delta_star = solve_delta_star(beta, frak_f)?;
    eval_pi(beta, delta_star, frak_f)
}

/// `(Sigma^f(beta), Sigma-tilde^f(beta))`; requires `M^f(beta) < 1/2`.
pub fn eval_sigmas(beta: f64, frak_f: JumpBound) -> Result<(f64, f64)> {
    let delta_star = solve_delta_star(beta, frak_f)?;
    let m = eval_pi(beta, delta_star, frak_f)?;
    if m >= 0.5 {
        return Err(Error::Domain(format!(
            "M >= 1/2 (M = {m}) at beta = {beta}; sigmas undefined"
        )));
    }
    let sigma = 2.0 * m / (1.0 - 2.0 * m);
    let w = beta - delta_star;
    let sigma_tilde = sigma * (w * frak_f.0).exp() / w;
    Ok((sigma, sigma_tilde))
}

/// Computes every constant and every admissibility flag at `(beta, frak_f)`.
pub fn evaluate(beta: f64, frak_f: JumpBound) -> Result<WellPosednessConstants> {
    let delta_star = solve_delta_star(beta, frak_f)?;
    let kappa = eval_kappa(delta_star, frak_f)?;
    let big_m = eval_pi(beta, delta_star, frak_f)?;
    let small = kappa < 0.5 && big_m < 0.5;
    let (sigma, sigma_tilde, type2_value) = if big_m < 0.5 {
        let sigma = 2.0 * big_m / (1.0 - 2.0 * big_m);
        let w = beta - delta_star;
        let growth = (w * frak_f.0).exp() / w;
        (Some(sigma), Some(sigma * growth), Some((16.0 + growth) * sigma))
    } else {
        (None, None, None)
    };
    Ok(WellPosednessConstants {
        beta,
        frak_f: frak_f.0,
        delta_star,
        kappa,
        big_m,
        sigma,
        sigma_tilde,
        type2_value,
        type1_ok: small && sigma_tilde.map_or(false, |s| s < 1.0),
        type1_noy_ok: small,
        type2_ok: small && type2_value.map_or(false, |v| v < 1.0),
    })
}

/// Admissibility of the Type-I fixed point: `kappa < 1/2`, `M < 1/2`,
/// `Sigma-tilde < 1` (the `type1_noy` flag drops the last condition).
pub fn check_type1(beta: f64, frak_f: JumpBound) -> Result<WellPosednessConstants> {
    evaluate(beta, frak_f)
}

/// Admissibility of the Type-II fixed point: `kappa < 1/2`, `M < 1/2` and
/// `(16 + e^{(beta-delta*) f}/(beta-delta*)) Sigma < 1`.
pub fn check_type2(beta: f64, frak_f: JumpBound) -> Result<WellPosednessConstants> {
    evaluate(beta, frak_f)
}

fn condition_holds(condition: Condition, beta: f64, frak_f: JumpBound) -> Result<bool> {
    let c = evaluate(beta, frak_f)?;
    Ok(match condition {
        Condition::Type1 => c.type1_ok,
        Condition::Type1NoY => c.type1_noy_ok,
        Condition::Type2 => c.type2_ok,
    })
}

/// Large-`beta` admissibility threshold: the condition holds for some `beta`
/// iff it holds in the `beta -> infinity` limit, where every constant is an
/// explicit function of `e * frak_f`.
fn asymptotically_admissible(condition: Condition, frak_f: JumpBound) -> bool {
    let x = std::f64::consts::E * frak_f.0;
    match condition {
        // kappa, M -> 9 e f, both < 1/2 iff 18 e f < 1.
        Condition::Type1NoY => 18.0 * x < 1.0,
        // additionally Sigma-tilde -> 18 (e f)^2 / (1 - 18 e f) < 1,
        // which tightens the bound to 18 e f < 3 (sqrt(11) - 3).
        Condition::Type1 => 18.0 * x < 3.0 * (11.0_f64.sqrt() - 3.0),
        // (16 + e f) * 18 e f / (1 - 18 e f) < 1.
        Condition::Type2 => x < 1.0 / (3.0 * (51.0 + 2603.0_f64.sqrt())),
    }
}

/// Infimum `beta` such that the chosen condition holds on `[beta, infinity)`,
/// to relative tolerance `1e-9`.
///
/// The admissible region is assumed to be an interval `[beta0, inf)`; a
/// geometric scan above the reported boundary guards that assumption and a
/// convergence error is raised if it fails.
pub fn min_beta(condition: Condition, frak_f: JumpBound) -> Result<f64> {
    if !asymptotically_admissible(condition, frak_f) {
        return Err(Error::NeverAdmissible(format!(
            "large-beta limit fails for frak_f = {}",
            frak_f.0
        )));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    if !condition_holds(condition, hi, frak_f)? {
        loop {
            lo = hi;
            hi *= 2.0;
            if hi > 1e18 {
                return Err(Error::Convergence(
                    "no admissible beta found below 1e18".into(),
                ));
            }
            if condition_holds(condition, hi, frak_f)? {
                break;
            }
        }
    }
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if condition_holds(condition, mid, frak_f)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let boundary = hi;
    for factor in [1.001, 1.01, 1.1, 2.0, 10.0] {
        if !condition_holds(condition, boundary * factor, frak_f)? {
            return Err(Error::Convergence(format!(
                "admissible region is not an interval: condition fails at {} above boundary {}",
                boundary * factor,
                boundary
            )));
        }
    }
    Ok(boundary)
}
