//! Flat parameter vectors with named segments, finite-difference gradients,
//! and analytic-vs-numeric gradient comparison.
//!
//! Every model in this crate stores its parameters in one flat `Vec<f64>` so
//! that any scalar loss can be probed coordinate by coordinate. The checker
//! compares an analytic gradient against the central-difference estimate and
//! reports the worst coordinate instead of a bare boolean.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Floor used in the relative-difference denominator so that near-zero
/// coordinates are compared absolutely.
pub const REL_DIFF_FLOOR: f64 = 1e-8;

/// Ordered list of named segments describing how a flat vector is carved up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    names: Vec<String>,
    offsets: Vec<usize>,
}

impl ParamLayout {
    /// Builds a layout from `(name, length)` pairs in storage order.
    pub fn new(segments: &[(&str, usize)]) -> Result<Self> {
        let mut names = Vec::with_capacity(segments.len());
        let mut offsets = Vec::with_capacity(segments.len() + 1);
        let mut total = 0usize;
        offsets.push(0);
        for (name, len) in segments {
            if names.iter().any(|n| n == name) {
                return Err(Error::invalid(format!("duplicate segment name {name:?}")));
            }
            names.push(name.to_string());
            total += len;
            offsets.push(total);
        }
        Ok(ParamLayout { names, offsets })
    }

    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn segment_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    /// Index range of the named segment, or an error if it does not exist.
    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("unknown segment name {name:?}")))?;
        Ok(self.offsets[idx]..self.offsets[idx + 1])
    }
}

/// A flat vector of finite floats together with its segment layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        ParamVector { layout, values }
    }

    /// Wraps existing values, validating length and finiteness.
    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::invalid(format!(
                "value count {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter vector".to_string(),
                index: bad,
            });
        }
        Ok(ParamVector { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.layout.range(name)?])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.layout.range(name)?;
        Ok(&mut self.values[range])
    }
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Largest absolute difference over all coordinates.
    pub max_abs_diff: f64,
    /// Largest relative difference over all coordinates.
    pub max_rel_diff: f64,
    /// Coordinate attaining `max_rel_diff`.
    pub worst_index: usize,
    /// True when `max_rel_diff` is within the requested tolerance.
    pub pass: bool,
}

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// Uses `(f(x + h e_k) - f(x - h e_k)) / (2 h)` per coordinate. The probe
/// values must be finite; a NaN or infinite evaluation is reported with the
/// offending coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = f(&probe);
        probe[k] = orig - h;
        let down = f(&probe);
        probe[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference probe".to_string(),
                index: k,
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Compares `analytic` against `numeric` coordinate by coordinate.
///
/// The relative difference at coordinate `k` is
/// `|a_k - n_k| / max(|a_k|, |n_k|, REL_DIFF_FLOOR)`, so coordinates where
/// both gradients are tiny are effectively compared absolutely. `worst_index`
/// always refers to the largest relative difference; for equal-length empty
/// inputs the report passes trivially.
pub fn check_gradient(analytic: &[f64], numeric: &[f64], tol: f64) -> Result<GradReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::invalid(format!(
            "gradient length mismatch: analytic {} vs numeric {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut max_abs_diff = 0.0f64;
    let mut max_rel_diff = 0.0f64;
    let mut worst_index = 0usize;
    for (k, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_DIFF_FLOOR);
        if abs > max_abs_diff {
            max_abs_diff = abs;
        }
        if rel > max_rel_diff {
            max_rel_diff = rel;
            worst_index = k;
        }
    }
    Ok(GradReport {
        max_abs_diff,
        max_rel_diff,
        worst_index,
        pass: max_rel_diff <= tol,
    })
}
