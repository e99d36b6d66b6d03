//! Two-branch recommendation backbone and its losses.
//!
//! The score of a user-item pair is a collaborative inner product plus a
//! projected content term:
//!
//! ```text
//! score(u, i, c) = <p_t[u], t[i]> + <p_f[u], W c>
//! ```
//!
//! where `c` is whatever content vector the caller supplies for the item
//! (raw features, masked features, or a fused mixture). The training loss is
//!
//! ```text
//! L = L_O + eta * L_U + kappa * L_I
//! ```
//!
//! `L_O` is plain binary cross-entropy over positives and negatives, `L_U`
//! reweights the same terms by a degree coefficient, and `L_I` pulls each
//! positive's co-occurrence neighbours up. All three are sums, not means, so
//! loss values scale with batch size.

mod checkpoint;
mod graph;
mod train;

pub use checkpoint::{load_model, save_model};
pub use graph::{item_similarity, ItemGraph};
pub use train::{train, AdamConfig, AdamState, TrainConfig, TrainOutcome};

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{FeatureTable, InteractionSet};
use crate::error::{Error, Result};
use crate::numgrad::{ParamLayout, ParamVector};

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x) = log(1 + exp(x))` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(sigmoid(x))`, stable for `|x|` up to at least 1e4.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Sizes that determine the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub num_users: usize,
    pub num_items: usize,
    /// Embedding size `k` shared by both user branches and the item table.
    pub embed_dim: usize,
    /// Content vector length `d`.
    pub content_dim: usize,
    /// Hidden width of each attention scorer; conventionally `2 * embed_dim`.
    pub attn_hidden: usize,
}

impl ModelDims {
    pub fn new(num_users: usize, num_items: usize, embed_dim: usize, content_dim: usize) -> Self {
        ModelDims {
            num_users,
            num_items,
            embed_dim,
            content_dim,
            attn_hidden: 2 * embed_dim,
        }
    }

    /// Length of the attention scorer input: `[p_t[u], p_f[u], t[i], f_i]`.
    pub fn attn_input_dim(&self) -> usize {
        3 * self.embed_dim + self.content_dim
    }

    /// Parameters of one attention scorer: dense layer, bias, output weights,
    /// output bias.
    fn attn_len(&self) -> usize {
        self.attn_hidden * self.attn_input_dim() + 2 * self.attn_hidden + 1
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&[
            ("user_collab", self.num_users * self.embed_dim),
            ("item_collab", self.num_items * self.embed_dim),
            ("user_content", self.num_users * self.embed_dim),
            ("projection", self.embed_dim * self.content_dim),
            ("attn_inv", self.attn_len()),
            ("attn_var", self.attn_len()),
        ])
        .expect("segment names are distinct")
    }
}

/// All trainable parameters of one backbone, stored flat.
///
/// Segments, in storage order:
/// * `user_collab`: per-user collaborative embeddings `p_t`, `num_users x k`
/// * `item_collab`: per-item embeddings `t`, `num_items x k`
/// * `user_content`: per-user content-taste embeddings `p_f`, `num_users x k`
/// * `projection`: content projection `W`, `k x d` row-major
/// * `attn_inv`, `attn_var`: the two attention scorers used during mask
///   learning (untouched by plain backbone training)
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    params: ParamVector,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let layout = Arc::new(dims.layout());
        ModelParams {
            dims,
            params: ParamVector::zeros(layout),
        }
    }

    /// Uniform init in `[-0.5/k, 0.5/k]` for every entry.
    pub fn init(dims: ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let bound = 0.5 / dims.embed_dim as f64;
        let layout = Arc::new(dims.layout());
        let values = (0..layout.total_len())
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let params = ParamVector::from_values(layout, values).expect("finite init");
        ModelParams { dims, params }
    }

    /// Wraps an existing flat vector; the layout must match `dims`.
    pub fn from_vector(dims: ModelDims, params: ParamVector) -> Result<Self> {
        if *params.layout().as_ref() != dims.layout() {
            return Err(Error::invalid("parameter layout does not match dims"));
        }
        Ok(ModelParams { dims, params })
    }

    /// Rebuilds a model from raw values (used by finite-difference probes).
    pub fn from_flat(dims: ModelDims, values: Vec<f64>) -> Result<Self> {
        let layout = Arc::new(dims.layout());
        Ok(ModelParams {
            dims,
            params: ParamVector::from_values(layout, values)?,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn vector(&self) -> &ParamVector {
        &self.params
    }

    pub fn vector_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn values(&self) -> &[f64] {
        self.params.values()
    }

    fn seg(&self, name: &str) -> &[f64] {
        self.params.segment(name).expect("layout segment")
    }

    pub fn user_collab(&self, user: u32) -> &[f64] {
        let k = self.dims.embed_dim;
        &self.seg("user_collab")[user as usize * k..(user as usize + 1) * k]
    }

    pub fn item_collab(&self, item: u32) -> &[f64] {
        let k = self.dims.embed_dim;
        &self.seg("item_collab")[item as usize * k..(item as usize + 1) * k]
    }

    pub fn user_content(&self, user: u32) -> &[f64] {
        let k = self.dims.embed_dim;
        &self.seg("user_content")[user as usize * k..(user as usize + 1) * k]
    }

    /// Content projection `W`, row-major `k x d`.
    pub fn projection(&self) -> &[f64] {
        self.seg("projection")
    }

    /// Parameters of the invariant-side attention head.
    pub fn attn_inv(&self) -> &[f64] {
        self.seg("attn_inv")
    }

    /// Parameters of the variant-side attention head.
    pub fn attn_var(&self) -> &[f64] {
        self.seg("attn_var")
    }

    /// Scores one pair against an explicit content vector.
    ///
    /// The content must have length `d` and be finite; a NaN or infinite
    /// entry is reported with its coordinate.
    pub fn score(&self, user: u32, item: u32, content: &[f64]) -> Result<f64> {
        if content.len() != self.dims.content_dim {
            return Err(Error::invalid(format!(
                "content length {} does not match model content_dim {}",
                content.len(),
                self.dims.content_dim
            )));
        }
        if let Some(bad) = content.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("content vector for item {item}"),
                index: bad,
            });
        }
        let mut wc = vec![0.0; self.dims.embed_dim];
        Ok(self.score_parts(user, item, content, &mut wc))
    }

    /// Computes the score and fills `wc = W * content` for gradient reuse.
    pub(crate) fn score_parts(&self, user: u32, item: u32, content: &[f64], wc: &mut [f64]) -> f64 {
        let k = self.dims.embed_dim;
        let d = self.dims.content_dim;
        debug_assert_eq!(content.len(), d);
        debug_assert_eq!(wc.len(), k);
        let w = self.projection();
        for (r, slot) in wc.iter_mut().enumerate() {
            let row = &w[r * d..(r + 1) * d];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(content.iter()) {
                acc += a * b;
            }
            *slot = acc;
        }
        let pt = self.user_collab(user);
        let ti = self.item_collab(item);
        let pf = self.user_content(user);
        let mut score = 0.0;
        for (a, b) in pt.iter().zip(ti.iter()) {
            score += a * b;
        }
        for (a, b) in pf.iter().zip(wc.iter()) {
            score += a * b;
        }
        score
    }
}

/// Supplies the content vector for a `(user, item)` pair.
///
/// Plain feature tables ignore the user; the fused content used during mask
/// learning depends on both because its attention weights read the user
/// embeddings.
pub trait ContentSource {
    fn dim(&self) -> usize;
    fn content_into(&self, user: u32, item: u32, out: &mut [f64]);
}

/// Raw item features, independent of the user.
pub struct RawContent<'a>(pub &'a FeatureTable);

impl ContentSource for RawContent<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn content_into(&self, _user: u32, item: u32, out: &mut [f64]) {
        out.copy_from_slice(self.0.item(item));
    }
}

/// Weights of the auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight `eta` of the degree-weighted term.
    pub eta: f64,
    /// Weight `kappa` of the neighbourhood term.
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eta: 1e-4,
            kappa: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::invalid("eta must be finite and non-negative"));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::invalid("kappa must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One training batch: positive pairs and sampled negative pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub positives: Vec<(u32, u32)>,
    pub negatives: Vec<(u32, u32)>,
}

impl Batch {
    /// Takes every positive and negative of the set, in sorted order.
    pub fn from_set(set: &InteractionSet) -> Self {
        Batch {
            positives: set.positives().collect(),
            negatives: set.negatives().collect(),
        }
    }
}

/// Per-user and per-item positive-interaction counts, borrowed from the set
/// that defines the training graph.
#[derive(Debug, Clone, Copy)]
pub struct Degrees<'a> {
    pub user: &'a [u32],
    pub item: &'a [u32],
}

impl<'a> Degrees<'a> {
    pub fn of(set: &'a InteractionSet) -> Self {
        Degrees {
            user: set.user_degrees(),
            item: set.item_degrees(),
        }
    }
}

/// Degree coefficient `(1/d_u) * sqrt((d_u + 1) / (d_i + 1))`.
///
/// A zero user degree is an error: the coefficient is only defined for users
/// that appear in the training positives.
pub fn degree_coeff(user_degree: u32, item_degree: u32) -> Result<f64> {
    if user_degree == 0 {
        return Err(Error::invalid(
            "degree coefficient undefined for a user with no positives",
        ));
    }
    let du = user_degree as f64;
    let di = item_degree as f64;
    Ok((1.0 / du) * ((du + 1.0) / (di + 1.0)).sqrt())
}

fn content_buf(source: &impl ContentSource, dims: &ModelDims) -> Result<Vec<f64>> {
    if source.dim() != dims.content_dim {
        return Err(Error::invalid(format!(
            "content source dim {} does not match model content_dim {}",
            source.dim(),
            dims.content_dim
        )));
    }
    Ok(vec![0.0; dims.content_dim])
}

/// Binary cross-entropy over the batch:
/// `sum_pos softplus(-score) + sum_neg softplus(score)`.
pub fn loss_o(batch: &Batch, content: &impl ContentSource, params: &ModelParams) -> Result<f64> {
    let mut c = content_buf(content, &params.dims)?;
    let mut wc = vec![0.0; params.dims.embed_dim];
    let mut loss = 0.0;
    for &(u, i) in &batch.positives {
        content.content_into(u, i, &mut c);
        loss += softplus(-params.score_parts(u, i, &c, &mut wc));
    }
    for &(u, i) in &batch.negatives {
        content.content_into(u, i, &mut c);
        loss += softplus(params.score_parts(u, i, &c, &mut wc));
    }
    Ok(loss)
}

/// Degree-weighted cross-entropy: each term of [`loss_o`] is scaled by the
/// degree coefficient of its pair.
pub fn loss_u(
    batch: &Batch,
    content: &impl ContentSource,
    params: &ModelParams,
    degrees: Degrees<'_>,
) -> Result<f64> {
    let mut c = content_buf(content, &params.dims)?;
    let mut wc = vec![0.0; params.dims.embed_dim];
    let mut loss = 0.0;
    for &(u, i) in &batch.positives {
        let nu = degree_coeff(degrees.user[u as usize], degrees.item[i as usize])?;
        content.content_into(u, i, &mut c);
        loss += nu * softplus(-params.score_parts(u, i, &c, &mut wc));
    }
    for &(u, i) in &batch.negatives {
        let nu = degree_coeff(degrees.user[u as usize], degrees.item[i as usize])?;
        content.content_into(u, i, &mut c);
        loss += nu * softplus(params.score_parts(u, i, &c, &mut wc));
    }
    Ok(loss)
}

/// Neighbourhood loss: for every positive `(u, i)`, each graph neighbour
/// `j` of `i` contributes `-s_ij * log(sigmoid(score(u, j)))`.
pub fn loss_i(
    positives: &[(u32, u32)],
    graph: &ItemGraph,
    content: &impl ContentSource,
    params: &ModelParams,
) -> Result<f64> {
    let mut c = content_buf(content, &params.dims)?;
    let mut wc = vec![0.0; params.dims.embed_dim];
    let mut loss = 0.0;
    for &(u, i) in positives {
        for &(j, s) in graph.neighbors(i) {
            content.content_into(u, j, &mut c);
            loss += s * softplus(-params.score_parts(u, j, &c, &mut wc));
        }
    }
    Ok(loss)
}

/// Full training loss `L_O + eta * L_U + kappa * L_I`.
pub fn total_loss(
    batch: &Batch,
    graph: &ItemGraph,
    degrees: Degrees<'_>,
    content: &impl ContentSource,
    params: &ModelParams,
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    let base = loss_o(batch, content, params)?;
    let degree = loss_u(batch, content, params, degrees)?;
    let neighbour = loss_i(&batch.positives, graph, content, params)?;
    Ok(base + weights.eta * degree + weights.kappa * neighbour)
}

/// Calls `f(user, item, positive_direction, weight)` once per scoring event
/// of [`total_loss`]: positives and negatives carry weight `1 + eta * nu`,
/// and every neighbour of a positive carries `kappa * s` in the positive
/// direction. [`total_loss`] equals the weighted softplus sum over exactly
/// these events, so gradient code built on this iterator stays consistent
/// with the loss it differentiates.
pub(crate) fn for_each_event<F>(
    batch: &Batch,
    graph: &ItemGraph,
    degrees: Degrees<'_>,
    weights: &LossWeights,
    mut f: F,
) -> Result<()>
where
    F: FnMut(u32, u32, bool, f64) -> Result<()>,
{
    for &(u, i) in &batch.positives {
        let nu = degree_coeff(degrees.user[u as usize], degrees.item[i as usize])?;
        f(u, i, true, 1.0 + weights.eta * nu)?;
        for &(j, s) in graph.neighbors(i) {
            f(u, j, true, weights.kappa * s)?;
        }
    }
    for &(u, i) in &batch.negatives {
        let nu = degree_coeff(degrees.user[u as usize], degrees.item[i as usize])?;
        f(u, i, false, 1.0 + weights.eta * nu)?;
    }
    Ok(())
}

/// Adds `g` times the score gradient of pair `(u, i)` with content `c` into
/// `acc`. `wc` must already hold `W * c` for this pair.
fn accumulate_pair(
    acc: &mut ParamVector,
    params: &ModelParams,
    u: u32,
    i: u32,
    c: &[f64],
    wc: &[f64],
    g: f64,
) {
    let k = params.dims.embed_dim;
    let d = params.dims.content_dim;
    let pt = params.user_collab(u).to_vec();
    let ti = params.item_collab(i).to_vec();
    let pf = params.user_content(u).to_vec();

    let seg = acc.segment_mut("user_collab").expect("layout segment");
    for (slot, v) in seg[u as usize * k..(u as usize + 1) * k].iter_mut().zip(ti.iter()) {
        *slot += g * v;
    }
    let seg = acc.segment_mut("item_collab").expect("layout segment");
    for (slot, v) in seg[i as usize * k..(i as usize + 1) * k].iter_mut().zip(pt.iter()) {
        *slot += g * v;
    }
    let seg = acc.segment_mut("user_content").expect("layout segment");
    for (slot, v) in seg[u as usize * k..(u as usize + 1) * k].iter_mut().zip(wc.iter()) {
        *slot += g * v;
    }
    let seg = acc.segment_mut("projection").expect("layout segment");
    for r in 0..k {
        let row = &mut seg[r * d..(r + 1) * d];
        let pf_r = pf[r];
        for (slot, cv) in row.iter_mut().zip(c.iter()) {
            *slot += g * pf_r * cv;
        }
    }
}

/// Analytic gradient of [`total_loss`] with the content vectors held fixed.
///
/// Only the four backbone segments receive gradient; the attention segments
/// stay exactly zero, as do embedding rows of users and items the batch never
/// touches.
pub fn grad_total_loss(
    batch: &Batch,
    graph: &ItemGraph,
    degrees: Degrees<'_>,
    content: &impl ContentSource,
    params: &ModelParams,
    weights: &LossWeights,
) -> Result<ParamVector> {
    weights.validate()?;
    let mut c = content_buf(content, &params.dims)?;
    let mut wc = vec![0.0; params.dims.embed_dim];
    let mut acc = ParamVector::zeros(params.params.layout().clone());

    for &(u, i) in &batch.positives {
        let nu = degree_coeff(degrees.user[u as usize], degrees.item[i as usize])?;
        content.content_into(u, i, &mut c);
        let score = params.score_parts(u, i, &c, &mut wc);
        // d/dscore of softplus(-score) is sigmoid(score) - 1.
        let g = (sigmoid(score) - 1.0) * (1.0 + weights.eta * nu);
        accumulate_pair(&mut acc, params, u, i, &c, &wc, g);

        for &(j, s) in graph.neighbors(i) {
            content.content_into(u, j, &mut c);
            let score = params.score_parts(u, j, &c, &mut wc);
            let g = weights.kappa * s * (sigmoid(score) - 1.0);
            accumulate_pair(&mut acc, params, u, j, &c, &wc, g);
        }
    }
    for &(u, i) in &batch.negatives {
        let nu = degree_coeff(degrees.user[u as usize], degrees.item[i as usize])?;
        content.content_into(u, i, &mut c);
        let score = params.score_parts(u, i, &c, &mut wc);
        // d/dscore of softplus(score) is sigmoid(score).
        let g = sigmoid(score) * (1.0 + weights.eta * nu);
        accumulate_pair(&mut acc, params, u, i, &c, &wc, g);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{check_gradient, finite_diff_grad, DEFAULT_H};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// A table whose every item vector is the given constant.
    fn const_features(num_items: usize, row: &[f64]) -> FeatureTable {
        let mut values = Vec::new();
        for _ in 0..num_items {
            values.extend_from_slice(row);
        }
        FeatureTable::new(num_items, row.len(), values, vec![0]).unwrap()
    }

    /// Builds a model where only named entries are nonzero.
    fn blank_model(num_users: usize, num_items: usize, k: usize, d: usize) -> ModelParams {
        ModelParams::zeros(ModelDims::new(num_users, num_items, k, d))
    }

    #[test]
    fn degree_coeff_matches_closed_form() {
        assert!((degree_coeff(2, 3).unwrap() - 0.43301).abs() < 1e-5);
        assert!((degree_coeff(4, 0).unwrap() - 0.55902).abs() < 1e-5);
        assert!(degree_coeff(0, 3).is_err());
    }

    #[test]
    fn score_is_collab_plus_projected_content() {
        let mut model = blank_model(1, 1, 2, 2);
        model.vector_mut().segment_mut("user_content").unwrap()[0] = 1.0;
        let w = model.vector_mut().segment_mut("projection").unwrap();
        w[0] = 1.0; // W = I
        w[3] = 1.0;
        let score = model.score(0, 0, &[3.0, 4.0]).unwrap();
        assert_eq!(score, 3.0);
    }

    #[test]
    fn score_rejects_bad_content() {
        let model = blank_model(1, 1, 2, 2);
        assert!(model.score(0, 0, &[1.0]).is_err());
        match model.score(0, 0, &[1.0, f64::INFINITY]).unwrap_err() {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn loss_o_at_zero_score_is_log_two() {
        let model = blank_model(1, 1, 2, 2);
        let features = const_features(1, &[0.0, 0.0]);
        let batch = Batch {
            positives: vec![(0, 0)],
            negatives: vec![],
        };
        let loss = loss_o(&batch, &RawContent(&features), &model).unwrap();
        assert!((loss - 0.693147).abs() < 1e-5, "got {loss}");
    }

    #[test]
    fn loss_o_saturates_without_overflow() {
        // A confident positive (score 50) and a confident negative (score -50)
        // together contribute less than 1e-8.
        let mut model = blank_model(1, 2, 1, 1);
        model.vector_mut().segment_mut("user_content").unwrap()[0] = 1.0;
        model.vector_mut().segment_mut("projection").unwrap()[0] = 50.0;
        let features =
            FeatureTable::new(2, 1, vec![1.0, -1.0], vec![0]).unwrap();
        let batch = Batch {
            positives: vec![(0, 0)],
            negatives: vec![(0, 1)],
        };
        let loss = loss_o(&batch, &RawContent(&features), &model).unwrap();
        assert!(loss < 1e-8 && loss > 0.0, "got {loss}");

        // Still finite at score magnitudes around 1e4, in both directions.
        model.vector_mut().segment_mut("projection").unwrap()[0] = 1e4;
        let loss = loss_o(&batch, &RawContent(&features), &model).unwrap();
        assert!(loss.is_finite() && loss < 1e-8);
        let flipped = Batch {
            positives: vec![(0, 1)],
            negatives: vec![(0, 0)],
        };
        let loss = loss_o(&flipped, &RawContent(&features), &model).unwrap();
        assert!(loss.is_finite() && loss >= 2e4);
    }

    #[test]
    fn loss_u_weights_by_degree_coeff() {
        // Single positive with nu = 0.5 (d_u = 2, d_i = 2 gives 0.5 * sqrt(3/3)).
        let model = blank_model(2, 2, 2, 2);
        let features = const_features(2, &[0.0, 0.0]);
        let set =
            InteractionSet::from_positives(2, 2, vec![(0, 0), (0, 1), (1, 0)]).unwrap();
        let batch = Batch {
            positives: vec![(0, 0)],
            negatives: vec![],
        };
        let loss = loss_u(&batch, &RawContent(&features), &model, Degrees::of(&set)).unwrap();
        assert!((loss - 0.346574).abs() < 1e-5, "got {loss}");
    }

    #[test]
    fn loss_i_uses_neighbour_similarities() {
        // Two items that always co-occur: s_01 = 1. Zero scores give log 2.
        let model = blank_model(2, 2, 2, 2);
        let features = const_features(2, &[0.0, 0.0]);
        let set =
            InteractionSet::from_positives(2, 2, vec![(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        let graph = ItemGraph::build(&set, 10);
        let loss = loss_i(&[(0, 0)], &graph, &RawContent(&features), &model).unwrap();
        assert!((loss - 0.693147).abs() < 1e-5, "got {loss}");

        // An isolated item has no neighbours and contributes nothing.
        let set = InteractionSet::from_positives(2, 2, vec![(0, 0), (1, 1)]).unwrap();
        let graph = ItemGraph::build(&set, 10);
        let loss = loss_i(&[(0, 0)], &graph, &RawContent(&features), &model).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn total_loss_reduces_to_loss_o_when_weights_vanish() {
        let mut r = rng(40);
        let model = ModelParams::init(ModelDims::new(3, 4, 2, 3), &mut r);
        let features = const_features(4, &[0.3, -0.2, 0.9]);
        let set = InteractionSet::from_positives(3, 4, vec![(0, 0), (1, 1), (2, 2)]).unwrap();
        let graph = ItemGraph::build(&set, 5);
        let batch = Batch::from_set(&set);
        let weights = LossWeights {
            eta: 0.0,
            kappa: 0.0,
        };
        let total = total_loss(
            &batch,
            &graph,
            Degrees::of(&set),
            &RawContent(&features),
            &model,
            &weights,
        )
        .unwrap();
        let base = loss_o(&batch, &RawContent(&features), &model).unwrap();
        assert_eq!(total, base);
    }

    #[test]
    fn gradient_leaves_untouched_rows_at_zero() {
        let mut r = rng(41);
        let model = ModelParams::init(ModelDims::new(3, 3, 2, 2), &mut r);
        let features = const_features(3, &[0.5, -0.5]);
        let set = InteractionSet::from_positives(3, 3, vec![(0, 1)]).unwrap();
        let graph = ItemGraph::build(&set, 5);
        let batch = Batch {
            positives: vec![(0, 1)],
            negatives: vec![],
        };
        let grad = grad_total_loss(
            &batch,
            &graph,
            Degrees::of(&set),
            &RawContent(&features),
            &model,
            &LossWeights::default(),
        )
        .unwrap();
        let k = 2;
        // User 2 and items 0, 2 never appear; their rows stay zero.
        assert!(grad.segment("user_collab").unwrap()[2 * k..3 * k].iter().all(|&v| v == 0.0));
        assert!(grad.segment("item_collab").unwrap()[0..k].iter().all(|&v| v == 0.0));
        assert!(grad.segment("item_collab").unwrap()[2 * k..3 * k].iter().all(|&v| v == 0.0));
        // Touched rows are nonzero, attention segments identically zero.
        assert!(grad.segment("user_collab").unwrap()[0..k].iter().any(|&v| v != 0.0));
        assert!(grad.segment("attn_inv").unwrap().iter().all(|&v| v == 0.0));
        assert!(grad.segment("attn_var").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let num_users = r.gen_range(1..4);
            let num_items = r.gen_range(2..5);
            let k = r.gen_range(1..4);
            let d = r.gen_range(1..4);
            let dims = ModelDims::new(num_users, num_items, k, d);
            let model = ModelParams::init(dims, &mut r);

            let mut values = Vec::with_capacity(num_items * d);
            for _ in 0..num_items * d {
                values.push(r.gen_range(-1.0..1.0));
            }
            let features = FeatureTable::new(num_items, d, values, vec![0]).unwrap();

            let mut pairs = Vec::new();
            for u in 0..num_users as u32 {
                pairs.push((u, r.gen_range(0..num_items as u32)));
                pairs.push((u, r.gen_range(0..num_items as u32)));
            }
            let set = InteractionSet::from_positives(num_users, num_items, pairs).unwrap();
            let graph = ItemGraph::build(&set, 3);
            let batch = Batch {
                positives: set.positives().collect(),
                negatives: set
                    .positives()
                    .map(|(u, _)| (u, r.gen_range(0..num_items as u32)))
                    .filter(|&(u, i)| !set.is_positive(u, i))
                    .collect(),
            };
            let weights = LossWeights {
                eta: 0.3,
                kappa: 0.2,
            };

            let analytic = grad_total_loss(
                &batch,
                &graph,
                Degrees::of(&set),
                &RawContent(&features),
                &model,
                &weights,
            )
            .unwrap();
            let numeric = finite_diff_grad(
                |x| {
                    let probe = ModelParams::from_flat(dims, x.to_vec()).unwrap();
                    total_loss(
                        &batch,
                        &graph,
                        Degrees::of(&set),
                        &RawContent(&features),
                        &probe,
                        &weights,
                    )
                    .unwrap()
                },
                model.values(),
                DEFAULT_H,
            )
            .unwrap();
            let report = check_gradient(analytic.values(), &numeric, 1e-6).unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn event_iteration_reproduces_the_total_loss() {
        for seed in 0..5 {
            let mut r = rng(300 + seed);
            let num_users = r.gen_range(2..5);
            let num_items = r.gen_range(3..6);
            let k = 3;
            let d = 2;
            let dims = ModelDims::new(num_users, num_items, k, d);
            let model = ModelParams::init(dims, &mut r);
            let mut values = Vec::with_capacity(num_items * d);
            for _ in 0..num_items * d {
                values.push(r.gen_range(-1.0..1.0));
            }
            let features = FeatureTable::new(num_items, d, values, vec![0]).unwrap();
            let mut pairs = Vec::new();
            for u in 0..num_users as u32 {
                pairs.push((u, r.gen_range(0..num_items as u32)));
                pairs.push((u, r.gen_range(0..num_items as u32)));
            }
            let set = InteractionSet::from_positives(num_users, num_items, pairs).unwrap();
            let graph = ItemGraph::build(&set, 3);
            let degrees = Degrees::of(&set);
            let batch = Batch {
                positives: set.positives().collect(),
                negatives: set
                    .positives()
                    .map(|(u, _)| (u, r.gen_range(0..num_items as u32)))
                    .filter(|&(u, i)| !set.is_positive(u, i))
                    .collect(),
            };
            let weights = LossWeights { eta: 0.3, kappa: 0.2 };
            let content = RawContent(&features);

            let direct =
                total_loss(&batch, &graph, degrees, &content, &model, &weights).unwrap();
            let mut c = vec![0.0; d];
            let mut wc = vec![0.0; k];
            let mut from_events = 0.0;
            for_each_event(&batch, &graph, degrees, &weights, |u, i, pos, w| {
                content.content_into(u, i, &mut c);
                let score = model.score_parts(u, i, &c, &mut wc);
                from_events += w * softplus(if pos { -score } else { score });
                Ok(())
            })
            .unwrap();
            assert!(
                (direct - from_events).abs() <= 1e-12 * (1.0 + direct.abs()),
                "seed {seed}: {direct} vs {from_events}"
            );
        }
    }

    #[test]
    fn stable_helpers_agree_with_naive_forms() {
        for &x in &[-30.0, -2.0, -0.5, 0.0, 0.5, 2.0, 30.0] {
            let naive = 1.0 / (1.0 + (-x as f64).exp());
            assert!((sigmoid(x) - naive).abs() < 1e-12);
            let naive_sp = (1.0 + (x as f64).exp()).ln();
            assert!((softplus(x) - naive_sp).abs() < 1e-12);
        }
        assert!(log_sigmoid(-1e4).is_finite());
        assert_eq!(log_sigmoid(1e4), 0.0);
        assert!((log_sigmoid(0.0) + 0.693147).abs() < 1e-5);
    }
}
