//! Invariant-mask learning over item feature dimensions.
//!
//! A global mask `m` in `[0,1]^d` splits every item's feature vector into an
//! invariant part `m ⊙ f` and a variant part `(1-m) ⊙ f`. The mask is fitted
//! by descending two objectives at once — the mean per-environment loss of a
//! masked scoring model, and a cross-environment gradient-variance penalty —
//! combined through the min-norm weight solver. The scoring model fuses the
//! two representation halves with a per-pair attention weight, scales the
//! result by a clipped-Gaussian sample `μ` around `m`, and feeds it to the
//! backbone as content.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{
    for_each_event, sigmoid, total_loss, AdamConfig, AdamState, Batch, ContentSource, Degrees,
    ItemGraph, LossWeights, ModelParams,
};
use crate::dataset::{sample_negatives, FeatureTable};
use crate::envid::EnvPartition;
use crate::error::{Error, Result};
use crate::numgrad::{finite_diff_grad, ParamVector, DEFAULT_H};
use crate::pareto::{combined_direction, solve_weights_full, ParetoWeights, WeightSolution};

/// Noise decay factor applied every [`SIGMA_DECAY_EVERY`] fitting iterations.
pub const SIGMA_DECAY: f64 = 0.9;
pub const SIGMA_DECAY_EVERY: usize = 10;

/// Default early-stop threshold on the sup-norm of a mask update.
pub const DEFAULT_STOP_TOL: f64 = 1e-5;

/// The mask vector together with its update hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    /// Per-feature-dimension mask, every entry in `[0,1]`.
    pub m: Vec<f64>,
    /// Standard deviation of the sampling noise; zero disables it.
    pub sigma: f64,
    /// L2 decay weight on `m`.
    pub lambda: f64,
    /// Step size of mask updates.
    pub step: f64,
}

impl MaskState {
    pub fn new(m: Vec<f64>, sigma: f64, lambda: f64, step: f64) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::invalid("mask must have at least one dimension"));
        }
        if let Some(bad) = m.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "mask entry {} at index {bad} outside [0, 1]",
                m[bad]
            )));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid("sigma must be finite and non-negative"));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        if !(step.is_finite() && step >= 0.0) {
            return Err(Error::invalid("step must be finite and non-negative"));
        }
        Ok(MaskState {
            m,
            sigma,
            lambda,
            step,
        })
    }

    /// The conventional starting point: every dimension at 0.5.
    pub fn uniform(dim: usize, sigma: f64, lambda: f64, step: f64) -> Result<Self> {
        Self::new(vec![0.5; dim], sigma, lambda, step)
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

/// One draw of the clipped-Gaussian mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    /// `mu_k = clip(m_k + epsilon_k, 0, 1)`.
    pub mu: Vec<f64>,
    /// The raw noise, kept so the draw can be replayed or frozen.
    pub epsilon: Vec<f64>,
}

impl MaskSample {
    /// Builds the sample a given noise vector would produce.
    pub fn from_noise(m: &[f64], epsilon: Vec<f64>) -> Self {
        assert_eq!(m.len(), epsilon.len(), "noise length must match the mask");
        let mu = m
            .iter()
            .zip(epsilon.iter())
            .map(|(&m_k, &e_k)| (m_k + e_k).clamp(0.0, 1.0))
            .collect();
        MaskSample { mu, epsilon }
    }
}

/// Draws `epsilon ~ N(0, sigma^2)` per coordinate and clips `m + epsilon`
/// into `[0,1]`. With `sigma = 0` the noise is exactly zero, so `mu == m`.
pub fn sample_mu(state: &MaskState, rng: &mut ChaCha8Rng) -> MaskSample {
    let epsilon: Vec<f64> = if state.sigma == 0.0 {
        vec![0.0; state.m.len()]
    } else {
        state
            .m
            .iter()
            .map(|_| state.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    MaskSample::from_noise(&state.m, epsilon)
}

/// `m ⊙ f`: the invariant share of a feature vector.
pub fn to_invariant(m: &[f64], f: &[f64]) -> Vec<f64> {
    assert_eq!(m.len(), f.len(), "mask and feature lengths must match");
    m.iter()
        .zip(f.iter())
        .map(|(&m_k, &f_k)| split_feature(m_k, f_k).0)
        .collect()
}

/// `(1-m) ⊙ f`: the variant share of a feature vector.
pub fn to_variant(m: &[f64], f: &[f64]) -> Vec<f64> {
    assert_eq!(m.len(), f.len(), "mask and feature lengths must match");
    m.iter()
        .zip(f.iter())
        .map(|(&m_k, &f_k)| split_feature(m_k, f_k).1)
        .collect()
}

/// Splits one coordinate into its invariant and variant shares so that the
/// two always sum back to `f` bitwise. The share with the larger weight is
/// the rounded product; the other is `f` minus that product, which is exact
/// because the product lies in `[f/2, f]` (Sterbenz), so no information is
/// lost to rounding.
fn split_feature(m: f64, f: f64) -> (f64, f64) {
    if m >= 0.5 {
        let invariant = m * f;
        (invariant, f - invariant)
    } else {
        let variant = (1.0 - m) * f;
        (f - variant, variant)
    }
}

/// Applies [`to_invariant`] to every item of a feature table.
pub fn invariant_table(m: &[f64], table: &FeatureTable) -> Result<FeatureTable> {
    masked_table(m, table, to_invariant)
}

/// Applies [`to_variant`] to every item of a feature table.
pub fn variant_table(m: &[f64], table: &FeatureTable) -> Result<FeatureTable> {
    masked_table(m, table, to_variant)
}

fn masked_table(
    m: &[f64],
    table: &FeatureTable,
    convert: fn(&[f64], &[f64]) -> Vec<f64>,
) -> Result<FeatureTable> {
    if m.len() != table.dim() {
        return Err(Error::invalid(format!(
            "mask length {} does not match feature dim {}",
            m.len(),
            table.dim()
        )));
    }
    let mut values = Vec::with_capacity(table.num_items() * table.dim());
    for i in 0..table.num_items() as u32 {
        values.extend(convert(m, table.item(i)));
    }
    FeatureTable::new(
        table.num_items(),
        table.dim(),
        values,
        table.modality_offsets().to_vec(),
    )
}

// ---------------------------------------------------------------------------
// Attention fusion
// ---------------------------------------------------------------------------

/// Views into one attention head's parameter block, laid out as the hidden
/// weight matrix (row-major, `hidden x input`), hidden bias, output weights,
/// and scalar output bias.
struct AttnHead<'a> {
    weight: &'a [f64],
    bias: &'a [f64],
    out_weight: &'a [f64],
    out_bias: f64,
}

fn attn_head<'a>(segment: &'a [f64], hidden: usize, input: usize) -> AttnHead<'a> {
    let (weight, rest) = segment.split_at(hidden * input);
    let (bias, rest) = rest.split_at(hidden);
    let (out_weight, rest) = rest.split_at(hidden);
    AttnHead {
        weight,
        bias,
        out_weight,
        out_bias: rest[0],
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Forward pass of one head on the implicit input `[p_t, p_f, t, f]`,
/// without materialising it. Returns the pre-activation output; when `z_out`
/// is given it receives the hidden activations (needed for backprop).
fn head_forward(
    head: &AttnHead<'_>,
    k: usize,
    pt: &[f64],
    pf: &[f64],
    ti: &[f64],
    f: &[f64],
    mut z_out: Option<&mut [f64]>,
) -> f64 {
    let input = 3 * k + f.len();
    let mut o = head.out_bias;
    for r in 0..head.bias.len() {
        let row = &head.weight[r * input..(r + 1) * input];
        let (w_pt, rest) = row.split_at(k);
        let (w_pf, rest) = rest.split_at(k);
        let (w_ti, w_f) = rest.split_at(k);
        let z = (head.bias[r] + dot(w_pt, pt) + dot(w_pf, pf) + dot(w_ti, ti) + dot(w_f, f))
            .tanh();
        if let Some(buf) = z_out.as_deref_mut() {
            buf[r] = z;
        }
        o += head.out_weight[r] * z;
    }
    o
}

/// Turns the two head outputs into fusion weights: independent sigmoids by
/// default, or a proper softmax when `softmax` is set.
fn fusion_alphas(o_inv: f64, o_var: f64, softmax: bool) -> (f64, f64) {
    if softmax {
        let m = o_inv.max(o_var);
        let e_inv = (o_inv - m).exp();
        let e_var = (o_var - m).exp();
        let sum = e_inv + e_var;
        (e_inv / sum, e_var / sum)
    } else {
        (sigmoid(o_inv), sigmoid(o_var))
    }
}

/// The fused representation of one pair, with its attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    /// `h = alpha_inv * phi + alpha_var * psi`.
    pub h: Vec<f64>,
    pub alpha_inv: f64,
    pub alpha_var: f64,
}

/// Fuses an item's invariant and variant representations with attention
/// weights computed from `[p_t[u], p_f[u], t[i], f_i]` by two one-hidden-layer
/// perceptrons (tanh hidden layer; sigmoid outputs, or softmax when
/// `softmax` is set).
pub fn attention_fuse(
    user: u32,
    item: u32,
    phi: &[f64],
    psi: &[f64],
    params: &ModelParams,
    features: &FeatureTable,
    softmax: bool,
) -> Result<Fusion> {
    let dims = params.dims();
    let d = dims.content_dim;
    if phi.len() != d || psi.len() != d {
        return Err(Error::invalid(format!(
            "representation length {} / {} does not match content dim {d}",
            phi.len(),
            psi.len()
        )));
    }
    if features.dim() != d {
        return Err(Error::invalid(format!(
            "feature dim {} does not match content dim {d}",
            features.dim()
        )));
    }
    if user as usize >= dims.num_users || item as usize >= dims.num_items {
        return Err(Error::invalid(format!(
            "pair ({user}, {item}) outside the model's id space"
        )));
    }
    let k = dims.embed_dim;
    let input = dims.attn_input_dim();
    let pt = params.user_collab(user);
    let pf = params.user_content(user);
    let ti = params.item_collab(item);
    let f = features.item(item);
    let head_inv = attn_head(params.attn_inv(), dims.attn_hidden, input);
    let head_var = attn_head(params.attn_var(), dims.attn_hidden, input);
    let o_inv = head_forward(&head_inv, k, pt, pf, ti, f, None);
    let o_var = head_forward(&head_var, k, pt, pf, ti, f, None);
    let (alpha_inv, alpha_var) = fusion_alphas(o_inv, o_var, softmax);
    if !(alpha_inv.is_finite() && alpha_var.is_finite()) {
        return Err(Error::NonFinite {
            what: "attention weight".to_string(),
            index: item as usize,
        });
    }
    let h = phi
        .iter()
        .zip(psi.iter())
        .map(|(&p, &q)| alpha_inv * p + alpha_var * q)
        .collect();
    Ok(Fusion {
        h,
        alpha_inv,
        alpha_var,
    })
}

// ---------------------------------------------------------------------------
// Masked content source
// ---------------------------------------------------------------------------

/// Everything the mask losses need besides the mask itself: raw features,
/// the co-occurrence graph, degree tables, loss weights, and the attention
/// normalisation mode.
#[derive(Clone, Copy)]
pub struct MaskContext<'a> {
    pub features: &'a FeatureTable,
    pub graph: &'a ItemGraph,
    pub degrees: Degrees<'a>,
    pub weights: LossWeights,
    pub softmax_attention: bool,
}

/// Content source producing `mu ⊙ h` per pair, where `h` fuses the mask-built
/// representations `phi = m ⊙ f` and `psi = f - m ⊙ f` by attention.
pub struct FusedContent<'a> {
    features: &'a FeatureTable,
    params: &'a ModelParams,
    m: &'a [f64],
    mu: &'a [f64],
    softmax: bool,
    scratch: RefCell<Vec<f64>>,
}

impl<'a> FusedContent<'a> {
    pub fn new(
        features: &'a FeatureTable,
        params: &'a ModelParams,
        m: &'a [f64],
        mu: &'a [f64],
        softmax: bool,
    ) -> Self {
        FusedContent {
            features,
            params,
            m,
            mu,
            softmax,
            scratch: RefCell::new(Vec::new()),
        }
    }
}

impl ContentSource for FusedContent<'_> {
    fn dim(&self) -> usize {
        self.features.dim()
    }

    fn content_into(&self, user: u32, item: u32, out: &mut [f64]) {
        let dims = self.params.dims();
        let k = dims.embed_dim;
        let input = dims.attn_input_dim();
        let pt = self.params.user_collab(user);
        let pf = self.params.user_content(user);
        let ti = self.params.item_collab(item);
        let f = self.features.item(item);
        let head_inv = attn_head(self.params.attn_inv(), dims.attn_hidden, input);
        let head_var = attn_head(self.params.attn_var(), dims.attn_hidden, input);
        let o_inv = head_forward(&head_inv, k, pt, pf, ti, f, None);
        let o_var = head_forward(&head_var, k, pt, pf, ti, f, None);
        let (a_inv, a_var) = fusion_alphas(o_inv, o_var, self.softmax);
        for (idx, slot) in out.iter_mut().enumerate() {
            let (phi, psi) = split_feature(self.m[idx], f[idx]);
            *slot = self.mu[idx] * (a_inv * phi + a_var * psi);
        }
        // Keep the scratch field exercised even though this path needs no
        // buffer; gradient helpers reuse the same struct.
        let _ = &self.scratch;
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn validate_mask_inputs(
    ctx: &MaskContext<'_>,
    params: &ModelParams,
    m: &[f64],
    sample: Option<&MaskSample>,
) -> Result<()> {
    let d = ctx.features.dim();
    if params.dims().content_dim != d {
        return Err(Error::invalid(format!(
            "model content dim {} does not match feature dim {d}",
            params.dims().content_dim
        )));
    }
    if m.len() != d {
        return Err(Error::invalid(format!(
            "mask length {} does not match feature dim {d}",
            m.len()
        )));
    }
    if let Some(s) = sample {
        if s.mu.len() != d || s.epsilon.len() != d {
            return Err(Error::invalid("sample length does not match the mask"));
        }
    }
    ctx.weights.validate()
}

fn nonempty(batches: &[Batch]) -> impl Iterator<Item = &Batch> {
    batches
        .iter()
        .filter(|b| !(b.positives.is_empty() && b.negatives.is_empty()))
}

/// Mean masked-model loss over the non-empty environment batches (zero when
/// every batch is empty).
pub fn erm_loss(
    ctx: &MaskContext<'_>,
    batches: &[Batch],
    params: &ModelParams,
    state: &MaskState,
    sample: &MaskSample,
) -> Result<f64> {
    validate_mask_inputs(ctx, params, &state.m, Some(sample))?;
    erm_loss_at(ctx, batches, params, &state.m, &sample.mu)
}

fn erm_loss_at(
    ctx: &MaskContext<'_>,
    batches: &[Batch],
    params: &ModelParams,
    m: &[f64],
    mu: &[f64],
) -> Result<f64> {
    let content = FusedContent::new(ctx.features, params, m, mu, ctx.softmax_attention);
    let mut sum = 0.0;
    let mut count = 0usize;
    for batch in nonempty(batches) {
        sum += total_loss(batch, ctx.graph, ctx.degrees, &content, params, &ctx.weights)?;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gradient of one environment's loss with respect to the scaling vector
/// `mu`: per scoring event, `dscore/dmu = q ⊙ h` with `q = W^T p_f[u]`.
fn grad_mu_batch(
    ctx: &MaskContext<'_>,
    batch: &Batch,
    params: &ModelParams,
    m: &[f64],
    mu: &[f64],
) -> Result<Vec<f64>> {
    let dims = params.dims();
    let k = dims.embed_dim;
    let d = dims.content_dim;
    let input = dims.attn_input_dim();
    let mut grad = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut wc = vec![0.0; k];
    let w = params.projection();
    for_each_event(batch, ctx.graph, ctx.degrees, &ctx.weights, |u, i, pos, weight| {
        let pt = params.user_collab(u);
        let pf = params.user_content(u);
        let ti = params.item_collab(i);
        let f = ctx.features.item(i);
        let head_inv = attn_head(params.attn_inv(), dims.attn_hidden, input);
        let head_var = attn_head(params.attn_var(), dims.attn_hidden, input);
        let o_inv = head_forward(&head_inv, k, pt, pf, ti, f, None);
        let o_var = head_forward(&head_var, k, pt, pf, ti, f, None);
        let (a_inv, a_var) = fusion_alphas(o_inv, o_var, ctx.softmax_attention);
        for idx in 0..d {
            let phi = m[idx] * f[idx];
            h[idx] = a_inv * phi + a_var * (f[idx] - phi);
            c[idx] = mu[idx] * h[idx];
        }
        let score = params.score_parts(u, i, &c, &mut wc);
        let g = weight * (sigmoid(score) - if pos { 1.0 } else { 0.0 });
        for col in 0..d {
            let mut q = 0.0;
            for row in 0..k {
                q += w[row * d + col] * pf[row];
            }
            grad[col] += g * q * h[col];
        }
        Ok(())
    })?;
    Ok(grad)
}

/// Elementwise population variance of the gradients across environments,
/// masked by `mu` and reduced to a squared norm.
pub fn variance_penalty(grads: &[Vec<f64>], mu: &[f64]) -> f64 {
    if grads.len() <= 1 {
        return 0.0;
    }
    let n = grads.len() as f64;
    let d = mu.len();
    let mut penalty = 0.0;
    for idx in 0..d {
        let mean = grads.iter().map(|g| g[idx]).sum::<f64>() / n;
        let var = grads
            .iter()
            .map(|g| {
                let c = g[idx] - mean;
                c * c
            })
            .sum::<f64>()
            / n;
        let masked = var * mu[idx];
        penalty += masked * masked;
    }
    penalty
}

/// Cross-environment invariance penalty: the squared norm of the per-
/// coordinate population variance of `∇_mu loss^e`, masked by `mu`. Zero
/// when at most one environment has data.
pub fn irm_penalty(
    ctx: &MaskContext<'_>,
    batches: &[Batch],
    params: &ModelParams,
    state: &MaskState,
    sample: &MaskSample,
) -> Result<f64> {
    validate_mask_inputs(ctx, params, &state.m, Some(sample))?;
    irm_penalty_at(ctx, batches, params, &state.m, &sample.mu)
}

fn irm_penalty_at(
    ctx: &MaskContext<'_>,
    batches: &[Batch],
    params: &ModelParams,
    m: &[f64],
    mu: &[f64],
) -> Result<f64> {
    let grads: Vec<Vec<f64>> = nonempty(batches)
        .map(|batch| grad_mu_batch(ctx, batch, params, m, mu))
        .collect::<Result<_>>()?;
    Ok(variance_penalty(&grads, mu))
}

/// The full mask objective `w_erm * L_erm + w_irm * L_irm + (lambda/2)‖m‖²`.
pub fn mask_objective(
    ctx: &MaskContext<'_>,
    batches: &[Batch],
    params: &ModelParams,
    state: &MaskState,
    sample: &MaskSample,
    weights: &ParetoWeights,
) -> Result<f64> {
    let erm = erm_loss(ctx, batches, params, state, sample)?;
    let irm = irm_penalty(ctx, batches, params, state, sample)?;
    let decay = 0.5 * state.lambda * state.m.iter().map(|v| v * v).sum::<f64>();
    Ok(weights.w_erm * erm + weights.w_irm * irm + decay)
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Analytic gradient of [`erm_loss`] with respect to the mask `m`.
///
/// Each score depends on `m` along two paths: through `mu = clip(m + eps)`
/// (straight-through inside the open interval, zero at saturated
/// coordinates) and through the representations `phi`/`psi` built from `m`
/// directly:
///
/// ```text
/// dscore/dm_k = q_k * ( 1{0 < m_k + eps_k < 1} * h_k
///                       + mu_k * (alpha_inv - alpha_var) * f_k )
/// ```
pub fn grad_mask_erm(
    ctx: &MaskContext<'_>,
    batches: &[Batch],
    params: &ModelParams,
    state: &MaskState,
    sample: &MaskSample,
) -> Result<Vec<f64>> {
    validate_mask_inputs(ctx, params, &state.m, Some(sample))?;
    let dims = params.dims();
    let k = dims.embed_dim;
    let d = dims.content_dim;
    let input = dims.attn_input_dim();
    let m = &state.m;
    let mu = &sample.mu;
    let interior: Vec<bool> = m
        .iter()
        .zip(sample.epsilon.iter())
        .map(|(&m_k, &e_k)| {
            let raw = m_k + e_k;
            raw > 0.0 && raw < 1.0
        })
        .collect();

    let mut grad = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut wc = vec![0.0; k];
    let w = params.projection();
    let mut count = 0usize;
    for batch in nonempty(batches) {
        count += 1;
        for_each_event(batch, ctx.graph, ctx.degrees, &ctx.weights, |u, i, pos, weight| {
            let pt = params.user_collab(u);
            let pf = params.user_content(u);
            let ti = params.item_collab(i);
            let f = ctx.features.item(i);
            let head_inv = attn_head(params.attn_inv(), dims.attn_hidden, input);
            let head_var = attn_head(params.attn_var(), dims.attn_hidden, input);
            let o_inv = head_forward(&head_inv, k, pt, pf, ti, f, None);
            let o_var = head_forward(&head_var, k, pt, pf, ti, f, None);
            let (a_inv, a_var) = fusion_alphas(o_inv, o_var, ctx.softmax_attention);
            for idx in 0..d {
                let phi = m[idx] * f[idx];
                h[idx] = a_inv * phi + a_var * (f[idx] - phi);
                c[idx] = mu[idx] * h[idx];
            }
            let score = params.score_parts(u, i, &c, &mut wc);
            let g = weight * (sigmoid(score) - if pos { 1.0 } else { 0.0 });
            let alpha_diff = a_inv - a_var;
            for col in 0..d {
                let mut q = 0.0;
                for row in 0..k {
                    q += w[row * d + col] * pf[row];
                }
                let through_mu = if interior[col] { h[col] } else { 0.0 };
                let through_reps = mu[col] * alpha_diff * f[col];
                grad[col] += g * q * (through_mu + through_reps);
            }
            Ok(())
        })?;
    }
    if count > 0 {
        for v in grad.iter_mut() {
            *v /= count as f64;
        }
    }
    Ok(grad)
}

/// Gradient of [`irm_penalty`] with respect to `m`, by central finite
/// differences with the noise `epsilon` frozen (each probe re-clips
/// `m + epsilon`). The penalty stacks two differentiations, so a numeric
/// outer derivative is both simpler and safer than a third-order chain.
pub fn grad_mask_irm(
    ctx: &MaskContext<'_>,
    batches: &[Batch],
    params: &ModelParams,
    state: &MaskState,
    sample: &MaskSample,
    fd_step: f64,
) -> Result<Vec<f64>> {
    validate_mask_inputs(ctx, params, &state.m, Some(sample))?;
    // Evaluate once up front so data errors surface as errors rather than
    // panics inside the probe closure.
    irm_penalty_at(ctx, batches, params, &state.m, &sample.mu)?;
    let eps = &sample.epsilon;
    finite_diff_grad(
        |probe| {
            let mu: Vec<f64> = probe
                .iter()
                .zip(eps.iter())
                .map(|(&m_k, &e_k)| (m_k + e_k).clamp(0.0, 1.0))
                .collect();
            irm_penalty_at(ctx, batches, params, probe, &mu)
                .expect("penalty evaluation cannot fail after the initial check")
        },
        &state.m,
        fd_step,
    )
}

/// Analytic gradient of [`erm_loss`] with respect to every model parameter,
/// including the attention heads.
pub fn grad_theta_erm(
    ctx: &MaskContext<'_>,
    batches: &[Batch],
    params: &ModelParams,
    state: &MaskState,
    sample: &MaskSample,
) -> Result<ParamVector> {
    validate_mask_inputs(ctx, params, &state.m, Some(sample))?;
    let dims = params.dims();
    let k = dims.embed_dim;
    let d = dims.content_dim;
    let hdim = dims.attn_hidden;
    let input = dims.attn_input_dim();
    let m = &state.m;
    let mu = &sample.mu;
    let softmax = ctx.softmax_attention;

    let mut acc = ParamVector::zeros(params.vector().layout().clone());
    let mut x = vec![0.0; input];
    let mut z_inv = vec![0.0; hdim];
    let mut z_var = vec![0.0; hdim];
    let mut dz = vec![0.0; hdim];
    let mut dx = vec![0.0; input];
    let mut h = vec![0.0; d];
    let mut c = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut wc = vec![0.0; k];
    let mut count = 0usize;

    for batch in nonempty(batches) {
        count += 1;
        for_each_event(batch, ctx.graph, ctx.degrees, &ctx.weights, |u, i, pos, weight| {
            let pt = params.user_collab(u);
            let pf = params.user_content(u);
            let ti = params.item_collab(i);
            let f = ctx.features.item(i);
            x[..k].copy_from_slice(pt);
            x[k..2 * k].copy_from_slice(pf);
            x[2 * k..3 * k].copy_from_slice(ti);
            x[3 * k..].copy_from_slice(f);

            let head_inv = attn_head(params.attn_inv(), hdim, input);
            let head_var = attn_head(params.attn_var(), hdim, input);
            let o_inv = head_forward(&head_inv, k, pt, pf, ti, f, Some(&mut z_inv));
            let o_var = head_forward(&head_var, k, pt, pf, ti, f, Some(&mut z_var));
            let (a_inv, a_var) = fusion_alphas(o_inv, o_var, softmax);

            for idx in 0..d {
                let phi = m[idx] * f[idx];
                h[idx] = a_inv * phi + a_var * (f[idx] - phi);
                c[idx] = mu[idx] * h[idx];
            }
            let score = params.score_parts(u, i, &c, &mut wc);
            let g = weight * (sigmoid(score) - if pos { 1.0 } else { 0.0 });

            let w = params.projection();
            for col in 0..d {
                let mut acc_q = 0.0;
                for row in 0..k {
                    acc_q += w[row * d + col] * pf[row];
                }
                q[col] = acc_q;
            }

            // Upstream gradients of the two attention weights.
            let mut up_inv = 0.0;
            let mut up_var = 0.0;
            for idx in 0..d {
                let phi = m[idx] * f[idx];
                let psi = f[idx] - phi;
                up_inv += q[idx] * mu[idx] * phi;
                up_var += q[idx] * mu[idx] * psi;
            }
            up_inv *= g;
            up_var *= g;
            let (go_inv, go_var) = if softmax {
                let mixed = up_inv * a_inv + up_var * a_var;
                (a_inv * (up_inv - mixed), a_var * (up_var - mixed))
            } else {
                (up_inv * a_inv * (1.0 - a_inv), up_var * a_var * (1.0 - a_var))
            };

            dx.iter_mut().for_each(|v| *v = 0.0);
            for (head, z, go, seg_name) in [
                (&head_inv, &z_inv, go_inv, "attn_inv"),
                (&head_var, &z_var, go_var, "attn_var"),
            ] {
                for r in 0..hdim {
                    dz[r] = go * head.out_weight[r] * (1.0 - z[r] * z[r]);
                }
                let seg = acc.segment_mut(seg_name).expect("layout segment");
                for r in 0..hdim {
                    let row = &mut seg[r * input..(r + 1) * input];
                    let dz_r = dz[r];
                    for (slot, xv) in row.iter_mut().zip(x.iter()) {
                        *slot += dz_r * xv;
                    }
                }
                let bias_base = hdim * input;
                for r in 0..hdim {
                    seg[bias_base + r] += dz[r];
                    seg[bias_base + hdim + r] += go * z[r];
                }
                seg[bias_base + 2 * hdim] += go;
                for r in 0..hdim {
                    let row = &head.weight[r * input..(r + 1) * input];
                    let dz_r = dz[r];
                    for (slot, wv) in dx.iter_mut().zip(row.iter()) {
                        *slot += dz_r * wv;
                    }
                }
            }

            // Direct paths plus the attention-input paths.
            let seg = acc.segment_mut("user_collab").expect("layout segment");
            let base = u as usize * k;
            for r in 0..k {
                seg[base + r] += g * ti[r] + dx[r];
            }
            let seg = acc.segment_mut("user_content").expect("layout segment");
            for r in 0..k {
                seg[base + r] += g * wc[r] + dx[k + r];
            }
            let seg = acc.segment_mut("item_collab").expect("layout segment");
            let ibase = i as usize * k;
            for r in 0..k {
                seg[ibase + r] += g * pt[r] + dx[2 * k + r];
            }
            let seg = acc.segment_mut("projection").expect("layout segment");
            for r in 0..k {
                let row = &mut seg[r * d..(r + 1) * d];
                let pf_r = g * pf[r];
                for (slot, cv) in row.iter_mut().zip(c.iter()) {
                    *slot += pf_r * cv;
                }
            }
            Ok(())
        })?;
    }
    if count > 0 {
        let scale = 1.0 / count as f64;
        for v in acc.values_mut() {
            *v *= scale;
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Updates
// ---------------------------------------------------------------------------

/// How the two objective gradients are weighted each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParetoMode {
    /// Solve for the min-norm weights every iteration.
    Adaptive,
    /// Fix the weights at `(1, 0)`.
    ErmOnly,
    /// Fix the weights at `(0, 1)`.
    IrmOnly,
}

impl std::str::FromStr for ParetoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(ParetoMode::Adaptive),
            "erm_only" => Ok(ParetoMode::ErmOnly),
            "irm_only" => Ok(ParetoMode::IrmOnly),
            other => Err(Error::invalid(format!(
                "unknown pareto mode {other:?} (expected adaptive, erm_only, or irm_only)"
            ))),
        }
    }
}

impl ParetoMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParetoMode::Adaptive => "adaptive",
            ParetoMode::ErmOnly => "erm_only",
            ParetoMode::IrmOnly => "irm_only",
        }
    }

    fn solve(&self, g_erm: &[f64], g_irm: &[f64]) -> Result<WeightSolution> {
        match self {
            ParetoMode::Adaptive => solve_weights_full(g_erm, g_irm),
            ParetoMode::ErmOnly => Ok(WeightSolution {
                weights: ParetoWeights {
                    w_erm: 1.0,
                    w_irm: 0.0,
                },
                raw_w_erm: 1.0,
            }),
            ParetoMode::IrmOnly => Ok(WeightSolution {
                weights: ParetoWeights {
                    w_erm: 0.0,
                    w_irm: 1.0,
                },
                raw_w_erm: 0.0,
            }),
        }
    }
}

/// One mask step with externally chosen weights:
/// `m ← clip(m - step * (w_erm g_erm + w_irm g_irm + lambda m))`.
pub fn update_mask_with(
    state: &MaskState,
    g_erm: &[f64],
    g_irm: &[f64],
    weights: &ParetoWeights,
) -> Result<MaskState> {
    if g_erm.len() != state.m.len() || g_irm.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "gradient lengths {} / {} do not match mask length {}",
            g_erm.len(),
            g_irm.len(),
            state.m.len()
        )));
    }
    let direction = combined_direction(g_erm, g_irm, weights);
    let m = state
        .m
        .iter()
        .zip(direction.iter())
        .map(|(&m_k, &d_k)| (m_k - state.step * (d_k + state.lambda * m_k)).clamp(0.0, 1.0))
        .collect();
    Ok(MaskState {
        m,
        ..state.clone()
    })
}

/// One mask step with min-norm weights solved from the two gradients.
/// Returns the new state and the solved weights (with the pre-clip value).
pub fn update_mask(
    state: &MaskState,
    g_erm: &[f64],
    g_irm: &[f64],
) -> Result<(MaskState, WeightSolution)> {
    let solution = solve_weights_full(g_erm, g_irm)?;
    let next = update_mask_with(state, g_erm, g_irm, &solution.weights)?;
    Ok((next, solution))
}

/// Knobs for [`fit_mask`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitMaskOptions {
    pub iters: usize,
    pub mode: ParetoMode,
    /// Adam learning rate for the model parameters.
    pub theta_lr: f64,
    pub adam: AdamConfig,
    /// Negatives per positive when materialising environment batches.
    pub neg_ratio: usize,
    /// Early stop when the sup-norm of a mask update falls below this.
    pub stop_tol: f64,
    /// Probe step of the numeric invariance-penalty gradient.
    pub fd_step: f64,
}

impl Default for FitMaskOptions {
    fn default() -> Self {
        FitMaskOptions {
            iters: 40,
            mode: ParetoMode::Adaptive,
            theta_lr: 0.01,
            adam: AdamConfig::default(),
            neg_ratio: 1,
            stop_tol: DEFAULT_STOP_TOL,
            fd_step: DEFAULT_H,
        }
    }
}

/// Per-iteration diagnostics of the fitting loop.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskIterLog {
    pub iter: usize,
    pub erm: f64,
    pub irm: f64,
    /// Weighted objective including the decay term, at the pre-update mask.
    pub objective: f64,
    pub w_erm: f64,
    pub raw_w_erm: f64,
    /// Sup-norm of this iteration's mask change.
    pub delta_inf: f64,
    pub sigma: f64,
}

/// Result of [`fit_mask`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: MaskState,
    pub params: ModelParams,
    pub logs: Vec<MaskIterLog>,
    pub stopped_early: bool,
}

/// Builds one batch per environment: the environment's positives plus
/// freshly sampled negatives. Environments without pairs yield empty batches.
pub fn build_env_batches(
    partition: &EnvPartition,
    neg_ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    (0..partition.num_envs())
        .map(|env| {
            let subset = partition.env_subset(env)?;
            if subset.num_positives() == 0 {
                return Ok(Batch {
                    positives: Vec::new(),
                    negatives: Vec::new(),
                });
            }
            let sampled = sample_negatives(&subset, neg_ratio, rng)?;
            Ok(Batch::from_set(&sampled))
        })
        .collect()
}

/// Fits the mask for up to `opts.iters` iterations.
///
/// Environment batches are materialised once. Every iteration draws a fresh
/// `mu`, computes both mask gradients and the model-parameter gradient at
/// the current point, weights them per `opts.mode`, then applies the mask
/// step and an Adam step (on `w_erm * ∇_theta L_erm`) from that same point.
/// Noise decays by [`SIGMA_DECAY`] every [`SIGMA_DECAY_EVERY`] iterations,
/// and the loop stops early once an update's sup-norm drops below
/// `opts.stop_tol`.
pub fn fit_mask(
    ctx: &MaskContext<'_>,
    partition: &EnvPartition,
    params: ModelParams,
    state: MaskState,
    opts: &FitMaskOptions,
    rng: &mut ChaCha8Rng,
) -> Result<FitOutcome> {
    validate_mask_inputs(ctx, &params, &state.m, None)?;
    if !(opts.theta_lr.is_finite() && opts.theta_lr > 0.0) {
        return Err(Error::invalid("theta_lr must be positive"));
    }
    if !(opts.fd_step.is_finite() && opts.fd_step > 0.0) {
        return Err(Error::invalid("fd_step must be positive"));
    }
    if opts.iters == 0 {
        return Ok(FitOutcome {
            state,
            params,
            logs: Vec::new(),
            stopped_early: false,
        });
    }

    let batches = build_env_batches(partition, opts.neg_ratio, rng)?;
    let mut state = state;
    let mut params = params;
    let mut adam = AdamState::new(params.values().len(), opts.adam);
    let mut logs = Vec::with_capacity(opts.iters);
    let mut stopped_early = false;

    for iter in 0..opts.iters {
        if iter > 0 && iter % SIGMA_DECAY_EVERY == 0 {
            state.sigma *= SIGMA_DECAY;
        }
        let sample = sample_mu(&state, rng);
        let g_erm = grad_mask_erm(ctx, &batches, &params, &state, &sample)?;
        // With fixed (1, 0) weights the invariance gradient is multiplied by
        // zero, so the costly numeric differentiation can be skipped.
        let g_irm = if opts.mode == ParetoMode::ErmOnly {
            vec![0.0; state.m.len()]
        } else {
            grad_mask_irm(ctx, &batches, &params, &state, &sample, opts.fd_step)?
        };
        let solution = opts.mode.solve(&g_erm, &g_irm)?;

        let erm = erm_loss(ctx, &batches, &params, &state, &sample)?;
        let irm = irm_penalty(ctx, &batches, &params, &state, &sample)?;
        let decay = 0.5 * state.lambda * state.m.iter().map(|v| v * v).sum::<f64>();
        let objective =
            solution.weights.w_erm * erm + solution.weights.w_irm * irm + decay;

        // A zero weight zeroes the whole parameter gradient; Adam still
        // steps (keeping its schedule uniform) but provably cannot move the
        // parameters while every accumulated gradient is zero.
        let scaled: Vec<f64> = if solution.weights.w_erm > 0.0 {
            let g_theta = grad_theta_erm(ctx, &batches, &params, &state, &sample)?;
            g_theta
                .values()
                .iter()
                .map(|v| solution.weights.w_erm * v)
                .collect()
        } else {
            vec![0.0; params.values().len()]
        };
        let next = update_mask_with(&state, &g_erm, &g_irm, &solution.weights)?;
        let delta_inf = next
            .m
            .iter()
            .zip(state.m.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        adam.step(params.vector_mut().values_mut(), &scaled, opts.theta_lr);

        logs.push(MaskIterLog {
            iter,
            erm,
            irm,
            objective,
            w_erm: solution.weights.w_erm,
            raw_w_erm: solution.raw_w_erm,
            delta_inf,
            sigma: state.sigma,
        });
        state = next;
        if delta_inf < opts.stop_tol {
            stopped_early = true;
            break;
        }
    }
    Ok(FitOutcome {
        state,
        params,
        logs,
        stopped_early,
    })
}

// ---------------------------------------------------------------------------
// Mask dump
// ---------------------------------------------------------------------------

/// Writes one `index<TAB>modality<TAB>m_value` line per mask coordinate,
/// where modality is the feature block the coordinate belongs to.
pub fn write_mask(path: &Path, m: &[f64], features: &FeatureTable) -> Result<()> {
    if m.len() != features.dim() {
        return Err(Error::invalid(format!(
            "mask length {} does not match feature dim {}",
            m.len(),
            features.dim()
        )));
    }
    let mut out = String::new();
    for (idx, &value) in m.iter().enumerate() {
        writeln!(out, "{idx}\t{}\t{value}", features.modality_of(idx)).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a mask dump back into a vector, checking that the indices are the
/// consecutive range `0..d` and every value lies in `[0,1]`.
pub fn load_mask(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let idx_field = fields
            .next()
            .ok_or_else(|| Error::parse(path, line_no, "missing index field"))?;
        let _modality = fields
            .next()
            .ok_or_else(|| Error::parse(path, line_no, "missing modality field"))?;
        let value_field = fields
            .next()
            .ok_or_else(|| Error::parse(path, line_no, "missing value field"))?;
        let idx: usize = idx_field
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad index {idx_field:?}")))?;
        if idx != m.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected index {}, found {idx}", m.len()),
            ));
        }
        let value: f64 = value_field
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad value {value_field:?}")))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::parse(
                path,
                line_no,
                format!("mask value {value} outside [0, 1]"),
            ));
        }
        m.push(value);
    }
    if m.is_empty() {
        return Err(Error::parse(path, 1, "empty mask file"));
    }
    Ok(m)
}
