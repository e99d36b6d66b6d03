//! Heterogeneous environment identification over interaction data.
//!
//! Interactions are partitioned into environments by alternating two phases:
//! train one backbone model per environment on its current subset (with the
//! variant item representations as content input), then reassign every
//! interaction to the environment whose model scores it highest. The loop
//! stops when the partition is stable or a round cap is reached.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    ContentSource, Degrees, ItemGraph, ModelDims, ModelParams, TrainConfig, train,
};
use crate::dataset::InteractionSet;
use crate::error::{Error, Result};

/// An assignment of interaction pairs to environment indices.
///
/// The per-environment subsets are disjoint by construction and their union
/// is exactly the stored pair list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvPartition {
    num_envs: usize,
    num_users: usize,
    num_items: usize,
    pairs: Vec<(u32, u32)>,
    assignment: Vec<usize>,
}

impl EnvPartition {
    pub fn new(
        num_envs: usize,
        num_users: usize,
        num_items: usize,
        pairs: Vec<(u32, u32)>,
        assignment: Vec<usize>,
    ) -> Result<Self> {
        if num_envs == 0 {
            return Err(Error::invalid("a partition needs at least one environment"));
        }
        if pairs.len() != assignment.len() {
            return Err(Error::invalid(format!(
                "{} pairs but {} assignments",
                pairs.len(),
                assignment.len()
            )));
        }
        for &(u, i) in &pairs {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::invalid(format!(
                    "pair ({u}, {i}) outside {num_users} users x {num_items} items"
                )));
            }
        }
        if let Some(&e) = assignment.iter().find(|&&e| e >= num_envs) {
            return Err(Error::invalid(format!(
                "environment index {e} out of range for {num_envs} environments"
            )));
        }
        let mut seen = pairs.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate pair in partition"));
        }
        Ok(EnvPartition {
            num_envs,
            num_users,
            num_items,
            pairs,
            assignment,
        })
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Number of interaction pairs in the partition.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    /// Environment index per pair, aligned with [`Self::pairs`].
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Pair counts per environment.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_envs];
        for &e in &self.assignment {
            sizes[e] += 1;
        }
        sizes
    }

    /// The pairs currently assigned to environment `env`.
    pub fn pairs_of(&self, env: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.pairs
            .iter()
            .zip(self.assignment.iter())
            .filter(move |&(_, &e)| e == env)
            .map(|(&pair, _)| pair)
    }

    /// Environment `env`'s pairs as a standalone interaction set sharing the
    /// full id space (so embeddings and degree tables stay aligned).
    pub fn env_subset(&self, env: usize) -> Result<InteractionSet> {
        if env >= self.num_envs {
            return Err(Error::invalid(format!(
                "environment {env} out of range for {} environments",
                self.num_envs
            )));
        }
        InteractionSet::from_positives(self.num_users, self.num_items, self.pairs_of(env))
    }

    /// Writes one `user<TAB>item<TAB>env` line per pair (dense indices).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (&(u, i), &e) in self.pairs.iter().zip(self.assignment.iter()) {
            writeln!(out, "{u}\t{i}\t{e}").expect("string write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a partition dump written by [`Self::write`]. The id space and
    /// environment count are supplied by the caller (they are config-level
    /// facts a text dump cannot be trusted to define).
    pub fn load(path: &Path, num_envs: usize, num_users: usize, num_items: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        let mut assignment = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let mut next = |what: &str| {
                fields
                    .next()
                    .ok_or_else(|| Error::parse(path, line_no, format!("missing {what} field")))
            };
            let user = next("user")?;
            let item = next("item")?;
            let env = next("env")?;
            let user: u32 = user
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad user id {user:?}")))?;
            let item: u32 = item
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad item id {item:?}")))?;
            let env: usize = env
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad env index {env:?}")))?;
            pairs.push((user, item));
            assignment.push(env);
        }
        Self::new(num_envs, num_users, num_items, pairs, assignment)
    }
}

/// One backbone model per environment.
#[derive(Debug, Clone)]
pub struct EnvModels {
    models: Vec<ModelParams>,
}

impl EnvModels {
    /// Freshly initialised models, one per environment, drawn from `rng` in
    /// environment order.
    pub fn init(num_envs: usize, dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_envs == 0 {
            return Err(Error::invalid("need at least one environment model"));
        }
        let models = (0..num_envs).map(|_| ModelParams::init(dims, rng)).collect();
        Ok(EnvModels { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn model(&self, env: usize) -> &ModelParams {
        &self.models[env]
    }

    pub fn models(&self) -> &[ModelParams] {
        &self.models
    }
}

/// Assigns every interaction of `data` to a uniformly random environment.
pub fn init_partition(
    data: &InteractionSet,
    num_envs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EnvPartition> {
    if num_envs == 0 {
        return Err(Error::invalid("num_envs must be at least 1"));
    }
    let pairs: Vec<(u32, u32)> = data.positives().collect();
    let assignment: Vec<usize> = pairs.iter().map(|_| rng.gen_range(0..num_envs)).collect();
    EnvPartition::new(num_envs, data.num_users(), data.num_items(), pairs, assignment)
}

/// Moves one random pair from the largest environment into each empty one,
/// returning the repaired environment indices. Training is undefined on an
/// empty subset, so this runs before every training pass.
pub fn repair_empty_envs(partition: &mut EnvPartition, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut repaired = Vec::new();
    loop {
        let sizes = partition.sizes();
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let largest = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(e, _)| e)
            .expect("at least one environment");
        if sizes[largest] <= 1 {
            // Nothing left to donate; give up rather than loop forever.
            break;
        }
        let members: Vec<usize> = partition
            .assignment
            .iter()
            .enumerate()
            .filter(|&(_, &e)| e == largest)
            .map(|(idx, _)| idx)
            .collect();
        let &chosen = members.choose(rng).expect("largest env is nonempty");
        partition.assignment[chosen] = empty;
        repaired.push(empty);
    }
    repaired
}

/// Trains every environment's model on that environment's subset, in place.
///
/// Empty environments are first re-seeded with one pair stolen from the
/// largest environment (the returned list names them). `graph` and `degrees`
/// describe the full training set; `content` supplies the variant item
/// representations. Models are updated in place so repeated calls continue
/// from the previous round's parameters.
pub fn train_env_models(
    partition: &mut EnvPartition,
    models: &mut EnvModels,
    graph: &ItemGraph,
    degrees: Degrees<'_>,
    content: &impl ContentSource,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if models.len() != partition.num_envs() {
        return Err(Error::invalid(format!(
            "{} models for {} environments",
            models.len(),
            partition.num_envs()
        )));
    }
    let repaired = repair_empty_envs(partition, rng);
    for env in 0..partition.num_envs() {
        let subset = partition.env_subset(env)?;
        if subset.num_positives() == 0 {
            // Unrepairable (fewer pairs than environments); skip training.
            continue;
        }
        let params = models.models[env].clone();
        let outcome = train(params, &subset, graph, degrees, content, config, rng)?;
        models.models[env] = outcome.params;
    }
    Ok(repaired)
}

/// The index of the environment whose model scores `(user, item)` highest,
/// with ties broken towards the lowest index.
pub fn assign_environment(
    user: u32,
    item: u32,
    models: &EnvModels,
    content: &[f64],
) -> Result<usize> {
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (env, model) in models.models.iter().enumerate() {
        let score = model.score(user, item, content)?;
        if score > best_score {
            best_score = score;
            best = env;
        }
    }
    Ok(best)
}

/// Knobs for [`identify`].
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyOptions {
    pub num_envs: usize,
    /// Cap on train/reassign rounds; hitting it is logged, not an error.
    pub max_rounds: usize,
    pub embed_dim: usize,
    /// Per-round training settings; `train.epochs` is the per-round epoch
    /// count, so total training effort is `max_rounds * train.epochs`.
    pub train: TrainConfig,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        IdentifyOptions {
            num_envs: 10,
            max_rounds: 10,
            embed_dim: 64,
            train: TrainConfig::default(),
        }
    }
}

/// Everything [`identify`] produces.
#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    pub partition: EnvPartition,
    pub models: EnvModels,
    /// Pairs that changed environment, one count per completed round.
    pub reassignments: Vec<usize>,
    /// `(round, env)` for every empty-environment repair.
    pub repairs: Vec<(usize, usize)>,
    /// True when the final round moved nothing.
    pub converged: bool,
}

/// Seeds the partition by splitting interactions into quantile buckets of
/// their content's projection onto its leading principal component.
///
/// Uniform random labels are a fixed point of the train/reassign alternation:
/// every environment subset is then the same mixture, the per-environment
/// models learn the same function, and reassignment only echoes noise back.
/// Like k-means++ for k-means, the seed must already correlate with some
/// real structure in the data; the strongest content mode is the natural
/// candidate, and the alternation refines the split from there. Falls back
/// to a uniform random partition when the content carries no variance.
fn seed_partition(
    data: &InteractionSet,
    content: &impl ContentSource,
    num_envs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EnvPartition> {
    if num_envs == 0 {
        return Err(Error::invalid("num_envs must be at least 1"));
    }
    let pairs: Vec<(u32, u32)> = data.positives().collect();
    let n = pairs.len();
    let d = content.dim();
    let mut buf = vec![0.0; d];

    let mut mean = vec![0.0; d];
    for &(u, i) in &pairs {
        content.content_into(u, i, &mut buf);
        for (m, v) in mean.iter_mut().zip(&buf) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for &(u, i) in &pairs {
        content.content_into(u, i, &mut buf);
        for r in 0..d {
            for c in 0..=r {
                cov[r * d + c] += (buf[r] - mean[r]) * (buf[c] - mean[c]);
            }
        }
    }
    for r in 0..d {
        for c in r + 1..d {
            cov[r * d + c] = cov[c * d + r];
        }
    }

    // Power iteration; the covariance is d x d, so this is cheap.
    let mut axis: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut degenerate = false;
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for r in 0..d {
            for c in 0..d {
                next[r] += cov[r * d + c] * axis[c];
            }
        }
        let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            degenerate = true;
            break;
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        axis = next;
    }
    if degenerate {
        return init_partition(data, num_envs, rng);
    }

    let mut projections: Vec<(f64, usize)> = pairs
        .iter()
        .enumerate()
        .map(|(idx, &(u, i))| {
            content.content_into(u, i, &mut buf);
            let p: f64 = buf.iter().zip(&axis).map(|(x, w)| x * w).sum();
            (p, idx)
        })
        .collect();
    projections.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut assignment = vec![0usize; n];
    for (rank, &(_, idx)) in projections.iter().enumerate() {
        assignment[idx] = rank * num_envs / n;
    }
    EnvPartition::new(num_envs, data.num_users(), data.num_items(), pairs, assignment)
}

/// Alternates per-environment training and argmax reassignment until the
/// partition stops changing or `max_rounds` is hit.
///
/// The starting partition comes from [`seed_partition`], not from uniform
/// random labels; see there for why the alternation cannot break symmetry on
/// its own.
pub fn identify(
    data: &InteractionSet,
    content: &impl ContentSource,
    graph: &ItemGraph,
    opts: &IdentifyOptions,
    rng: &mut ChaCha8Rng,
) -> Result<IdentifyOutcome> {
    if opts.max_rounds == 0 {
        return Err(Error::invalid("max_rounds must be at least 1"));
    }
    let mut partition = seed_partition(data, content, opts.num_envs, rng)?;
    let dims = ModelDims::new(
        data.num_users(),
        data.num_items(),
        opts.embed_dim,
        content.dim(),
    );
    let mut models = EnvModels::init(opts.num_envs, dims, rng)?;
    let degrees = Degrees::of(data);

    let mut reassignments = Vec::new();
    let mut repairs = Vec::new();
    let mut converged = false;
    let mut buf = vec![0.0; content.dim()];
    for round in 0..opts.max_rounds {
        let repaired = train_env_models(
            &mut partition,
            &mut models,
            graph,
            degrees,
            content,
            &opts.train,
            rng,
        )?;
        repairs.extend(repaired.into_iter().map(|env| (round, env)));

        let mut moved = 0usize;
        for idx in 0..partition.pairs.len() {
            let (u, i) = partition.pairs[idx];
            content.content_into(u, i, &mut buf);
            let env = assign_environment(u, i, &models, &buf)?;
            if env != partition.assignment[idx] {
                partition.assignment[idx] = env;
                moved += 1;
            }
        }
        reassignments.push(moved);
        if moved == 0 {
            converged = true;
            break;
        }
    }
    Ok(IdentifyOutcome {
        partition,
        models,
        reassignments,
        repairs,
        converged,
    })
}

/// Adjusted Rand index between two labelings of the same elements.
///
/// 1.0 means identical partitions (up to label permutation), 0.0 is the
/// chance level; the index can go slightly negative for anti-correlated
/// partitions. Degenerate cases where the correction denominator vanishes
/// (both labelings trivial) return 1.0.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "labelings differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("labelings must be non-empty"));
    }
    fn choose2(n: u64) -> u64 {
        n * n.saturating_sub(1) / 2
    }
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&n| choose2(n) as f64).sum();
    let sum_rows: f64 = rows.values().map(|&n| choose2(n) as f64).sum();
    let sum_cols: f64 = cols.values().map(|&n| choose2(n) as f64).sum();
    let total = choose2(a.len() as u64) as f64;
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom.abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}
