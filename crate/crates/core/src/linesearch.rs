//! Weak-Wolfe backtracking line search with a configurable step floor.
//!
//! The step starts at `alpha_init` and is halved on failure, never below
//! `alpha_min`. When the floor is reached without satisfying the Wolfe
//! conditions the step is still reported (with `floor_hit` set) so the
//! caller can take it anyway.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WolfeParams {
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub alpha_init: f64,
    pub alpha_min: f64,
    pub max_backtracks: usize,
}

impl Default for WolfeParams {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            c2: 0.9,
            alpha_init: 1.0,
            alpha_min: 0.1,
            max_backtracks: 10,
        }
    }
}

impl WolfeParams {
    /// Floor relaxed for benchmark use, where the step clamp of the
    /// training loop does not apply.
    pub fn bench() -> Self {
        Self {
            alpha_min: 1e-8,
            max_backtracks: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidInput(format!(
                "need 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if !(0.0 < self.alpha_min && self.alpha_min <= self.alpha_init && self.alpha_init <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "need 0 < alpha_min <= alpha_init <= 1, got {} and {}",
                self.alpha_min, self.alpha_init
            )));
        }
        if self.max_backtracks == 0 {
            return Err(Error::InvalidInput("max_backtracks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchResult {
    pub alpha: f64,
    pub f_evals: usize,
    pub g_evals: usize,
    pub wolfe_satisfied: bool,
    pub floor_hit: bool,
}

/// Checks the weak Wolfe conditions at a trial step.
///
/// `f0` and `g0p` are the objective and directional derivative at zero,
/// `f_alpha` and `g_alpha_p` the same quantities at the trial `alpha`.
/// Returns `(sufficient_decrease, curvature)`.
pub fn wolfe_check(
    f0: f64,
    g0p: f64,
    f_alpha: f64,
    g_alpha_p: f64,
    alpha: f64,
    c1: f64,
    c2: f64,
) -> Result<(bool, bool)> {
    if g0p >= 0.0 {
        return Err(Error::NotDescentDirection(g0p));
    }
    let sufficient_decrease = f_alpha <= f0 + c1 * alpha * g0p;
    let curvature = g_alpha_p >= c2 * g0p;
    Ok((sufficient_decrease, curvature))
}

/// Backtracking search for a step satisfying both Wolfe conditions.
///
/// `eval(alpha)` must return `(phi(alpha), phi'(alpha))` for the
/// one-dimensional restriction of the objective along the search
/// direction, and must be referentially transparent during one search.
/// Every call is counted. Trials: `alpha_init`, then halving clamped at
/// `alpha_min`. Stops when Wolfe holds, when the floor is reached, or
/// when the backtrack budget is spent (the last two report `floor_hit`).
pub fn line_search<F>(
    mut eval: F,
    f0: f64,
    g0p: f64,
    params: &WolfeParams,
) -> Result<LineSearchResult>
where
    F: FnMut(f64) -> (f64, f64),
{
    params.validate()?;
    if g0p >= 0.0 {
        return Err(Error::NotDescentDirection(g0p));
    }
    let mut alpha = params.alpha_init;
    let mut f_evals = 0;
    let mut g_evals = 0;
    let mut saw_finite = false;
    for backtracks in 0.. {
        let (f_alpha, g_alpha_p) = eval(alpha);
        f_evals += 1;
        g_evals += 1;
        if f_alpha.is_finite() && g_alpha_p.is_finite() {
            saw_finite = true;
            let (decrease, curvature) = wolfe_check(f0, g0p, f_alpha, g_alpha_p, alpha, params.c1, params.c2)?;
            if decrease && curvature {
                return Ok(LineSearchResult {
                    alpha,
                    f_evals,
                    g_evals,
                    wolfe_satisfied: true,
                    floor_hit: false,
                });
            }
        }
        if alpha <= params.alpha_min || backtracks >= params.max_backtracks {
            break;
        }
        alpha = (alpha / 2.0).max(params.alpha_min);
    }
    if !saw_finite {
        return Err(Error::LineSearchFailed(
            "objective was non-finite at every trial step".into(),
        ));
    }
    // Wolfe never held; report the floor step and let the caller decide.
    Ok(LineSearchResult {
        alpha,
        f_evals,
        g_evals,
        wolfe_satisfied: false,
        floor_hit: true,
    })
}
