//! Closed-form two-objective min-norm weighting.
//!
//! Given the gradients of two objectives, the solver picks convex weights so
//! that the combined direction has minimal norm over the segment between the
//! gradients:
//!
//! ```text
//! w_erm* = clip( (g_irm - g_erm)^T g_irm / ||g_erm - g_irm||^2 , 0, 1 )
//! ```
//!
//! The resulting update `-(w_erm g_erm + w_irm g_irm)` is a common descent
//! direction: unless it is (numerically) zero, it has non-positive inner
//! product with both gradients, bounded by `-||step||^2`.

use crate::error::{Error, Result};

/// Squared-distance threshold below which the two gradients are treated as
/// equal and the weights default to an even split.
pub const DEGENERATE_SQ_DIST: f64 = 1e-12;

/// Step norm below which [`DescentCheck`] declares stationarity.
pub const STATIONARY_NORM: f64 = 1e-10;

/// Convex combination weights for the two objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParetoWeights {
    pub w_erm: f64,
    pub w_irm: f64,
}

/// [`ParetoWeights`] together with the pre-clip solution, which is worth
/// logging because it shows how hard the constraint was binding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSolution {
    pub weights: ParetoWeights,
    pub raw_w_erm: f64,
}

/// Inner products of a proposed step with both gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentCheck {
    /// `g_erm . step` where `step = -(w_erm g_erm + w_irm g_irm)`.
    pub dot_erm: f64,
    /// `g_irm . step`.
    pub dot_irm: f64,
    /// `||step||^2`.
    pub sq_norm: f64,
    /// True when `||step|| < STATIONARY_NORM`.
    pub kkt_stationary: bool,
}

impl DescentCheck {
    /// The descent property: either the step is numerically zero, or both
    /// inner products are at most `-||step||^2` (within `slack`).
    pub fn holds(&self, slack: f64) -> bool {
        self.kkt_stationary
            || (self.dot_erm <= -self.sq_norm + slack
                && self.dot_irm <= -self.sq_norm + slack)
    }
}

fn validate_pair(g_erm: &[f64], g_irm: &[f64]) -> Result<()> {
    if g_erm.len() != g_irm.len() {
        return Err(Error::invalid(format!(
            "gradient length mismatch: {} vs {}",
            g_erm.len(),
            g_irm.len()
        )));
    }
    if g_erm.is_empty() {
        return Err(Error::invalid("gradients must be non-empty"));
    }
    for (what, g) in [("g_erm", g_erm), ("g_irm", g_irm)] {
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: what.to_string(),
                index: bad,
            });
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Solves for the min-norm convex weights, keeping the pre-clip value.
pub fn solve_weights_full(g_erm: &[f64], g_irm: &[f64]) -> Result<WeightSolution> {
    validate_pair(g_erm, g_irm)?;
    let mut sq_dist = 0.0;
    let mut numer = 0.0;
    for (e, i) in g_erm.iter().zip(g_irm.iter()) {
        let diff = i - e;
        sq_dist += diff * diff;
        numer += diff * i;
    }
    if sq_dist < DEGENERATE_SQ_DIST {
        return Ok(WeightSolution {
            weights: ParetoWeights {
                w_erm: 0.5,
                w_irm: 0.5,
            },
            raw_w_erm: 0.5,
        });
    }
    let raw = numer / sq_dist;
    let w_erm = raw.clamp(0.0, 1.0);
    Ok(WeightSolution {
        weights: ParetoWeights {
            w_erm,
            w_irm: 1.0 - w_erm,
        },
        raw_w_erm: raw,
    })
}

/// Solves for the min-norm convex weights over the two gradients.
pub fn solve_weights(g_erm: &[f64], g_irm: &[f64]) -> Result<ParetoWeights> {
    Ok(solve_weights_full(g_erm, g_irm)?.weights)
}

/// The weighted gradient `w_erm g_erm + w_irm g_irm`.
pub fn combined_direction(g_erm: &[f64], g_irm: &[f64], weights: &ParetoWeights) -> Vec<f64> {
    g_erm
        .iter()
        .zip(g_irm.iter())
        .map(|(e, i)| weights.w_erm * e + weights.w_irm * i)
        .collect()
}

/// Evaluates the descent property of the step `-(combined direction)`.
pub fn check_descent(g_erm: &[f64], g_irm: &[f64], weights: &ParetoWeights) -> DescentCheck {
    let direction = combined_direction(g_erm, g_irm, weights);
    let step: Vec<f64> = direction.iter().map(|v| -v).collect();
    let sq_norm = dot(&step, &step);
    DescentCheck {
        dot_erm: dot(g_erm, &step),
        dot_irm: dot(g_irm, &step),
        sq_norm,
        kkt_stationary: sq_norm.sqrt() < STATIONARY_NORM,
    }
}

/// Brute-force reference: scans `w = t / grid_steps` for `t in 0..=grid_steps`
/// and returns the `w` minimising `||w g_erm + (1-w) g_irm||^2`.
///
/// The squared norm is evaluated through its exact quadratic expansion
/// `w^2 ||g_erm||^2 + 2 w (1-w) g_erm.g_irm + (1-w)^2 ||g_irm||^2`, so the
/// scan costs O(n + grid_steps) rather than O(n * grid_steps). Ties keep the
/// smallest `w`.
pub fn oracle_min_norm(g_erm: &[f64], g_irm: &[f64], grid_steps: usize) -> Result<f64> {
    validate_pair(g_erm, g_irm)?;
    if grid_steps == 0 {
        return Err(Error::invalid("grid_steps must be at least 1"));
    }
    let a = dot(g_erm, g_erm);
    let b = dot(g_erm, g_irm);
    let c = dot(g_irm, g_irm);
    let mut best_w = 0.0;
    let mut best_val = f64::INFINITY;
    for t in 0..=grid_steps {
        let w = t as f64 / grid_steps as f64;
        let u = 1.0 - w;
        let val = w * w * a + 2.0 * w * u * b + u * u * c;
        if val < best_val {
            best_val = val;
            best_w = w;
        }
    }
    Ok(best_w)
}
