//! Interaction data, item features, synthetic generation, and IID/OOD splits.
//!
//! Interactions are implicit feedback: a set of `(user, item)` positives plus
//! sampled negatives. External files use raw integer ids; loading assigns
//! dense ids in first-appearance order and keeps the mapping so that splits
//! and dumps can be written back in the original id space.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::envid::EnvPartition;
use crate::error::{Error, Result};

/// One observed or sampled user-item pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    /// True for observed positive feedback, false for a sampled negative.
    pub positive: bool,
}

/// A deduplicated set of positive and negative interactions over dense ids.
///
/// Degrees are always recomputed from the positives, so they cannot drift
/// from the pair sets. Iteration order over either set is sorted by
/// `(user, item)`, which keeps every downstream consumer deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    num_users: usize,
    num_items: usize,
    positives: BTreeSet<(u32, u32)>,
    negatives: BTreeSet<(u32, u32)>,
    user_degree: Vec<u32>,
    item_degree: Vec<u32>,
}

impl InteractionSet {
    /// Builds a set from positives only; negatives start empty.
    pub fn from_positives<I>(num_users: usize, num_items: usize, positives: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, u32)>,
    {
        Self::from_parts(num_users, num_items, positives, std::iter::empty())
    }

    /// Builds a set from explicit positives and negatives.
    pub fn from_parts<I, J>(
        num_users: usize,
        num_items: usize,
        positives: I,
        negatives: J,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, u32)>,
        J: IntoIterator<Item = (u32, u32)>,
    {
        let mut pos = BTreeSet::new();
        for (u, i) in positives {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::invalid(format!(
                    "interaction ({u},{i}) out of range for {num_users} users x {num_items} items"
                )));
            }
            pos.insert((u, i));
        }
        let mut neg = BTreeSet::new();
        for (u, i) in negatives {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::invalid(format!(
                    "negative ({u},{i}) out of range for {num_users} users x {num_items} items"
                )));
            }
            if pos.contains(&(u, i)) {
                return Err(Error::invalid(format!(
                    "pair ({u},{i}) appears as both positive and negative"
                )));
            }
            neg.insert((u, i));
        }
        let mut user_degree = vec![0u32; num_users];
        let mut item_degree = vec![0u32; num_items];
        for &(u, i) in &pos {
            user_degree[u as usize] += 1;
            item_degree[i as usize] += 1;
        }
        Ok(InteractionSet {
            num_users,
            num_items,
            positives: pos,
            negatives: neg,
            user_degree,
            item_degree,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.len()
    }

    /// Positives in sorted `(user, item)` order.
    pub fn positives(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.positives.iter().copied()
    }

    /// Negatives in sorted `(user, item)` order.
    pub fn negatives(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.negatives.iter().copied()
    }

    pub fn is_positive(&self, user: u32, item: u32) -> bool {
        self.positives.contains(&(user, item))
    }

    /// Items the user interacted with, ascending.
    pub fn positive_items_of(&self, user: u32) -> impl Iterator<Item = u32> + '_ {
        self.positives
            .range((user, 0)..=(user, u32::MAX))
            .map(|&(_, i)| i)
    }

    pub fn user_degree(&self, user: u32) -> u32 {
        self.user_degree[user as usize]
    }

    pub fn item_degree(&self, item: u32) -> u32 {
        self.item_degree[item as usize]
    }

    pub fn user_degrees(&self) -> &[u32] {
        &self.user_degree
    }

    pub fn item_degrees(&self) -> &[u32] {
        &self.item_degree
    }

    /// All interactions (positives then negatives) as [`Interaction`] values.
    pub fn interactions(&self) -> impl Iterator<Item = Interaction> + '_ {
        let pos = self.positives.iter().map(|&(user, item)| Interaction {
            user,
            item,
            positive: true,
        });
        let neg = self.negatives.iter().map(|&(user, item)| Interaction {
            user,
            item,
            positive: false,
        });
        pos.chain(neg)
    }
}

/// Mapping between raw file ids and the dense ids used internally.
///
/// Dense ids are assigned in first-appearance order while reading the
/// interactions file, so loading the same file always yields the same map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMap {
    users: Vec<u64>,
    items: Vec<u64>,
    user_index: HashMap<u64, u32>,
    item_index: HashMap<u64, u32>,
}

impl IdMap {
    fn new() -> Self {
        IdMap {
            users: Vec::new(),
            items: Vec::new(),
            user_index: HashMap::new(),
            item_index: HashMap::new(),
        }
    }

    /// Identity map for data that is already dense (synthetic sets).
    pub fn identity(num_users: usize, num_items: usize) -> Self {
        let mut map = IdMap::new();
        for u in 0..num_users as u64 {
            map.intern_user(u);
        }
        for i in 0..num_items as u64 {
            map.intern_item(i);
        }
        map
    }

    fn intern_user(&mut self, raw: u64) -> u32 {
        if let Some(&dense) = self.user_index.get(&raw) {
            return dense;
        }
        let dense = self.users.len() as u32;
        self.users.push(raw);
        self.user_index.insert(raw, dense);
        dense
    }

    fn intern_item(&mut self, raw: u64) -> u32 {
        if let Some(&dense) = self.item_index.get(&raw) {
            return dense;
        }
        let dense = self.items.len() as u32;
        self.items.push(raw);
        self.item_index.insert(raw, dense);
        dense
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn raw_user(&self, dense: u32) -> u64 {
        self.users[dense as usize]
    }

    pub fn raw_item(&self, dense: u32) -> u64 {
        self.items[dense as usize]
    }

    pub fn dense_user(&self, raw: u64) -> Option<u32> {
        self.user_index.get(&raw).copied()
    }

    pub fn dense_item(&self, raw: u64) -> Option<u32> {
        self.item_index.get(&raw).copied()
    }
}

/// Dense per-item feature vectors plus the modality block boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    num_items: usize,
    dim: usize,
    /// Start index of each modality block; always begins with 0.
    modality_offsets: Vec<usize>,
    /// Row-major `num_items x dim`.
    values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(
        num_items: usize,
        dim: usize,
        values: Vec<f64>,
        modality_offsets: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if values.len() != num_items * dim {
            return Err(Error::invalid(format!(
                "feature value count {} does not match {num_items} items x {dim} dims",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature table".to_string(),
                index: bad,
            });
        }
        if modality_offsets.first() != Some(&0) {
            return Err(Error::invalid("modality offsets must start at 0"));
        }
        if !modality_offsets.windows(2).all(|w| w[0] < w[1])
            || *modality_offsets.last().unwrap() >= dim
        {
            return Err(Error::invalid(
                "modality offsets must be strictly increasing and below dim",
            ));
        }
        Ok(FeatureTable {
            num_items,
            dim,
            modality_offsets,
            values,
        })
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality_offsets(&self) -> &[usize] {
        &self.modality_offsets
    }

    /// Modality block index containing feature coordinate `k`.
    pub fn modality_of(&self, k: usize) -> usize {
        debug_assert!(k < self.dim);
        match self.modality_offsets.binary_search(&k) {
            Ok(block) => block,
            Err(insert) => insert - 1,
        }
    }

    pub fn item(&self, item: u32) -> &[f64] {
        let start = item as usize * self.dim;
        &self.values[start..start + self.dim]
    }
}

/// Train / IID-test / OOD-test partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: InteractionSet,
    pub test_iid: InteractionSet,
    pub test_ood: InteractionSet,
    /// Fraction of the in-distribution environment held out for IID testing.
    pub ratio: f64,
}

/// Parameters of the planted-structure synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    /// Feature dims whose effect on affinity is the same in every environment.
    pub d_inv: usize,
    /// Feature dims whose effect flips sign between environments.
    pub d_spu: usize,
    /// Number of generator environments.
    pub num_envs_true: usize,
    /// Probability that a spurious dim's sign flips in a non-base environment.
    pub flip_strength: f64,
    /// Fraction of all user-item pairs that become positives.
    pub density: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(Error::invalid("synthetic data needs users and items"));
        }
        if self.d_inv == 0 || self.d_spu == 0 {
            return Err(Error::invalid("d_inv and d_spu must be at least 1"));
        }
        if self.num_envs_true == 0 {
            return Err(Error::invalid("num_envs_true must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_strength) {
            return Err(Error::invalid("flip_strength must lie in [0, 1]"));
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::invalid("density must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_id(path: &Path, line_no: usize, field: &str, what: &str) -> Result<u64> {
    field
        .parse::<u64>()
        .map_err(|_| Error::parse(path, line_no, format!("non-integer {what} id {field:?}")))
}

/// Loads `user<TAB>item` positives, assigning dense ids in first-appearance
/// order. Duplicate lines collapse to one interaction.
pub fn load_interactions(path: &Path) -> Result<(InteractionSet, IdMap)> {
    let text = read_to_string(path)?;
    let mut ids = IdMap::new();
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let (user_str, item_str) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_no, "expected user<TAB>item"))?;
        let raw_user = parse_id(path, line_no, user_str, "user")?;
        let raw_item = parse_id(path, line_no, item_str, "item")?;
        let u = ids.intern_user(raw_user);
        let i = ids.intern_item(raw_item);
        pairs.push((u, i));
    }
    if pairs.is_empty() {
        return Err(Error::parse(path, 1, "no interactions in file"));
    }
    let set = InteractionSet::from_positives(ids.num_users(), ids.num_items(), pairs)?;
    Ok((set, ids))
}

/// Loads positives through an existing id map; unknown raw ids are errors.
///
/// The returned set spans the full universe of the map, so items that never
/// occur in this particular file still count toward `num_items`.
pub fn load_interactions_with_map(path: &Path, ids: &IdMap) -> Result<InteractionSet> {
    let text = read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let (user_str, item_str) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_no, "expected user<TAB>item"))?;
        let raw_user = parse_id(path, line_no, user_str, "user")?;
        let raw_item = parse_id(path, line_no, item_str, "item")?;
        let u = ids
            .dense_user(raw_user)
            .ok_or_else(|| Error::parse(path, line_no, format!("unknown user id {raw_user}")))?;
        let i = ids
            .dense_item(raw_item)
            .ok_or_else(|| Error::parse(path, line_no, format!("unknown item id {raw_item}")))?;
        pairs.push((u, i));
    }
    InteractionSet::from_positives(ids.num_users(), ids.num_items(), pairs)
}

/// Writes positives as `user<TAB>item` lines in raw id space, sorted by
/// dense `(user, item)`.
pub fn write_interactions(path: &Path, set: &InteractionSet, ids: &IdMap) -> Result<()> {
    let mut out = String::new();
    for (u, i) in set.positives() {
        out.push_str(&format!("{}\t{}\n", ids.raw_user(u), ids.raw_item(i)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads `item<TAB>v1,v2,...,vd` feature rows for every item in the map.
///
/// Each mapped item must appear exactly once and all rows must share one
/// dimension. The table uses a single modality block; synthetic tables carry
/// their own block structure.
pub fn load_features(path: &Path, ids: &IdMap) -> Result<FeatureTable> {
    let text = read_to_string(path)?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; ids.num_items()];
    let mut dim: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let (item_str, vec_str) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_no, "expected item<TAB>v1,v2,..."))?;
        let raw_item = parse_id(path, line_no, item_str, "item")?;
        let Some(dense) = ids.dense_item(raw_item) else {
            // Features may cover a larger catalogue than the interactions.
            continue;
        };
        let mut row = Vec::new();
        for field in vec_str.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(path, line_no, format!("non-numeric feature value {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, line_no, "non-finite feature value"));
            }
            row.push(v);
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("feature dimension {} does not match earlier rows ({d})", row.len()),
                ));
            }
            _ => {}
        }
        if rows[dense as usize].is_some() {
            return Err(Error::parse(path, line_no, format!("duplicate item id {raw_item}")));
        }
        rows[dense as usize] = Some(row);
    }
    let dim = dim.ok_or_else(|| Error::parse(path, 1, "no feature rows in file"))?;
    let mut values = Vec::with_capacity(ids.num_items() * dim);
    for (dense, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| {
            Error::invalid(format!(
                "item {} has interactions but no feature row",
                ids.raw_item(dense as u32)
            ))
        })?;
        values.extend(row);
    }
    FeatureTable::new(ids.num_items(), dim, values, vec![0])
}

/// Writes the feature table as `item<TAB>v1,v2,...` lines in raw id space.
pub fn write_features(path: &Path, table: &FeatureTable, ids: &IdMap) -> Result<()> {
    let mut out = String::new();
    for dense in 0..table.num_items() as u32 {
        let row: Vec<String> = table.item(dense).iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!("{}\t{}\n", ids.raw_item(dense), row.join(",")));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an id map as `kind<TAB>dense<TAB>raw` lines.
pub fn write_id_map(path: &Path, ids: &IdMap) -> Result<()> {
    let mut out = String::new();
    for (dense, raw) in ids.users.iter().enumerate() {
        out.push_str(&format!("user\t{dense}\t{raw}\n"));
    }
    for (dense, raw) in ids.items.iter().enumerate() {
        out.push_str(&format!("item\t{dense}\t{raw}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an id map written by [`write_id_map`].
pub fn load_id_map(path: &Path) -> Result<IdMap> {
    let text = read_to_string(path)?;
    let mut map = IdMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let mut fields = line.split('\t');
        let kind = fields.next().unwrap_or("");
        let dense = fields
            .next()
            .ok_or_else(|| Error::parse(path, line_no, "expected kind<TAB>dense<TAB>raw"))?;
        let raw = fields
            .next()
            .ok_or_else(|| Error::parse(path, line_no, "expected kind<TAB>dense<TAB>raw"))?;
        let dense: usize = dense
            .parse()
            .map_err(|_| Error::parse(path, line_no, "non-integer dense id"))?;
        let raw = parse_id(path, line_no, raw, "raw")?;
        let assigned = match kind {
            "user" => map.intern_user(raw) as usize,
            "item" => map.intern_item(raw) as usize,
            other => {
                return Err(Error::parse(path, line_no, format!("unknown id kind {other:?}")));
            }
        };
        if assigned != dense {
            return Err(Error::parse(
                path,
                line_no,
                format!("dense ids out of order: expected {assigned}, got {dense}"),
            ));
        }
    }
    Ok(map)
}

/// Samples `ratio` negatives per positive, uniformly over each user's
/// non-interacted items, without replacement per user.
///
/// Existing negatives in `set` are discarded and replaced, which is what
/// per-epoch resampling wants. If a user has fewer non-interacted items than
/// requested the whole remaining pool is taken. A user who interacted with
/// every item is an error because no valid negative exists.
pub fn sample_negatives(
    set: &InteractionSet,
    ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InteractionSet> {
    if ratio == 0 {
        return Err(Error::invalid("negative ratio must be at least 1"));
    }
    let num_items = set.num_items() as u32;
    let mut negatives: Vec<(u32, u32)> = Vec::new();
    let mut user: Option<u32> = None;
    let mut user_items: BTreeSet<u32> = BTreeSet::new();
    let flush = |u: u32, items: &BTreeSet<u32>, rng: &mut ChaCha8Rng, out: &mut Vec<(u32, u32)>| -> Result<()> {
        let pool = num_items as usize - items.len();
        if pool == 0 {
            return Err(Error::invalid(format!(
                "user {u} interacted with every item; no negatives available"
            )));
        }
        let needed = (ratio * items.len()).min(pool);
        if needed * 2 >= pool {
            // Tight pool: enumerate the candidates and take a random prefix.
            let mut candidates: Vec<u32> =
                (0..num_items).filter(|i| !items.contains(i)).collect();
            candidates.shuffle(rng);
            candidates.truncate(needed);
            out.extend(candidates.into_iter().map(|i| (u, i)));
        } else {
            let mut chosen = BTreeSet::new();
            while chosen.len() < needed {
                let i = rng.gen_range(0..num_items);
                if !items.contains(&i) {
                    chosen.insert(i);
                }
            }
            out.extend(chosen.into_iter().map(|i| (u, i)));
        }
        Ok(())
    };
    for (u, i) in set.positives() {
        if user != Some(u) {
            if let Some(prev) = user {
                flush(prev, &user_items, rng, &mut negatives)?;
            }
            user = Some(u);
            user_items.clear();
        }
        user_items.insert(i);
    }
    if let Some(prev) = user {
        flush(prev, &user_items, rng, &mut negatives)?;
    }
    InteractionSet::from_parts(
        set.num_users(),
        set.num_items(),
        set.positives(),
        negatives,
    )
}

/// Per-environment sign pattern over the spurious dims. Environment 0 is the
/// base pattern (all +1); later environments flip each dim independently
/// with probability `flip_strength`.
fn env_sign_patterns(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut patterns = Vec::with_capacity(spec.num_envs_true);
    for e in 0..spec.num_envs_true {
        let mut signs = vec![1.0; spec.d_spu];
        if e > 0 {
            for s in signs.iter_mut() {
                if rng.gen_bool(spec.flip_strength) {
                    *s = -1.0;
                }
            }
        }
        patterns.push(signs);
    }
    patterns
}

/// Invariant and spurious preference weights are drawn at the same scale:
/// within one environment the two halves carry equal signal, so a model that
/// keeps the spurious dims gains on in-distribution ranking but loses the
/// same amount once the signs flip.
const INV_WEIGHT_SCALE: f64 = 1.0;
const SPU_WEIGHT_SCALE: f64 = 1.0;

/// Generates a planted-structure dataset.
///
/// Item features are iid standard normal. Each user draws an invariant
/// preference vector (personal taste, shared across environments). The
/// spurious preference mixes one population-wide direction with per-user
/// variation, both sign-flipped by the environment pattern: the shared part
/// is a global exposure shift, the kind of structure that makes environments
/// recoverable from the data at all, while the per-user part makes spurious
/// gradients disagree across interaction subsets, which is the signal an
/// invariant mask learns from. Every user-item pair is assigned a generator
/// environment uniformly; the pairs with the highest affinity under their
/// own environment become positives, with the count chosen to hit `density`
/// exactly. Returns the interaction set, the feature table (modality blocks:
/// invariant dims then spurious dims), and the ground-truth environment
/// assignment of the positives.
pub fn make_synthetic(
    spec: &SyntheticSpec,
) -> Result<(InteractionSet, FeatureTable, EnvPartition)> {
    spec.validate()?;
    let mut rng = crate::pipeline::stage_rng(spec.seed, "synthetic", 0);
    let d = spec.d_inv + spec.d_spu;
    let num_users = spec.num_users;
    let num_items = spec.num_items;

    let mut features = Vec::with_capacity(num_items * d);
    for _ in 0..num_items * d {
        features.push(rng.sample::<f64, _>(StandardNormal));
    }
    let table = FeatureTable::new(num_items, d, features, vec![0, spec.d_inv])?;

    let mut inv_w = Vec::with_capacity(num_users * spec.d_inv);
    for _ in 0..num_users * spec.d_inv {
        inv_w.push(INV_WEIGHT_SCALE * rng.sample::<f64, _>(StandardNormal));
    }
    let shared_frac = std::f64::consts::FRAC_1_SQRT_2;
    let mut spu_shared = Vec::with_capacity(spec.d_spu);
    for _ in 0..spec.d_spu {
        spu_shared.push(rng.sample::<f64, _>(StandardNormal));
    }
    let mut spu_personal = Vec::with_capacity(num_users * spec.d_spu);
    for _ in 0..num_users * spec.d_spu {
        spu_personal.push(rng.sample::<f64, _>(StandardNormal));
    }
    let patterns = env_sign_patterns(spec, &mut rng);

    let total_pairs = num_users * num_items;
    let target = (spec.density * total_pairs as f64).round() as usize;
    if target == 0 || target >= total_pairs {
        return Err(Error::invalid(format!(
            "density {} is unreachable for {num_users} users x {num_items} items",
            spec.density
        )));
    }

    let mut env_of_pair = Vec::with_capacity(total_pairs);
    for _ in 0..total_pairs {
        env_of_pair.push(rng.gen_range(0..spec.num_envs_true));
    }

    let mut scored: Vec<(f64, u32, u32)> = Vec::with_capacity(total_pairs);
    for u in 0..num_users {
        let a = &inv_w[u * spec.d_inv..(u + 1) * spec.d_inv];
        for i in 0..num_items {
            let e = env_of_pair[u * num_items + i];
            let f = table.item(i as u32);
            let mut affinity = 0.0;
            for k in 0..spec.d_inv {
                affinity += a[k] * f[k];
            }
            for k in 0..spec.d_spu {
                let b = SPU_WEIGHT_SCALE
                    * shared_frac
                    * (spu_shared[k] + spu_personal[u * spec.d_spu + k]);
                affinity += b * patterns[e][k] * f[spec.d_inv + k];
            }
            scored.push((affinity, u as u32, i as u32));
        }
    }
    scored.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then_with(|| (x.1, x.2).cmp(&(y.1, y.2)))
    });
    scored.truncate(target);

    let mut pairs: Vec<(u32, u32)> = scored.iter().map(|&(_, u, i)| (u, i)).collect();
    pairs.sort_unstable();
    let assignment: Vec<usize> = pairs
        .iter()
        .map(|&(u, i)| env_of_pair[u as usize * num_items + i as usize])
        .collect();

    let set = InteractionSet::from_positives(num_users, num_items, pairs.iter().copied())?;
    let partition = EnvPartition::new(spec.num_envs_true, num_users, num_items, pairs, assignment)?;
    Ok((set, table, partition))
}

/// Splits a two-environment partition into train / IID test / OOD test.
///
/// The larger environment (ties go to the lower index) is shuffled and
/// `round(ratio * n)` of its pairs become the IID test set; the rest train.
/// The smaller environment is the OOD test set in full.
pub fn split_iid_ood(envs: &EnvPartition, ratio: f64, rng: &mut ChaCha8Rng) -> Result<SplitSpec> {
    if envs.num_envs() != 2 {
        return Err(Error::invalid(format!(
            "split needs exactly 2 environments, got {}",
            envs.num_envs()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split ratio must lie in (0, 1)"));
    }
    let sizes = envs.sizes();
    if sizes[0] == 0 || sizes[1] == 0 {
        return Err(Error::invalid("both environments must be nonempty"));
    }
    let larger = if sizes[0] >= sizes[1] { 0 } else { 1 };
    let smaller = 1 - larger;

    let mut in_dist: Vec<(u32, u32)> = envs.pairs_of(larger).collect();
    let held = (ratio * in_dist.len() as f64).round() as usize;
    if held == 0 || held >= in_dist.len() {
        return Err(Error::invalid(format!(
            "ratio {ratio} leaves train or IID test empty ({} in-distribution pairs)",
            in_dist.len()
        )));
    }
    in_dist.shuffle(rng);
    let test_iid_pairs = in_dist.split_off(in_dist.len() - held);

    let train = InteractionSet::from_positives(envs.num_users(), envs.num_items(), in_dist)?;
    let test_iid =
        InteractionSet::from_positives(envs.num_users(), envs.num_items(), test_iid_pairs)?;
    let test_ood = InteractionSet::from_positives(
        envs.num_users(),
        envs.num_items(),
        envs.pairs_of(smaller),
    )?;
    Ok(SplitSpec {
        train,
        test_iid,
        test_ood,
        ratio,
    })
}

/// File names used inside a split directory.
const SPLIT_FILES: [(&str, &str); 3] = [
    ("train", "train.tsv"),
    ("test_iid", "test_iid.tsv"),
    ("test_ood", "test_ood.tsv"),
];

/// Writes the three split files, the id map, and a manifest into `dir`.
/// Returns the manifest path.
pub fn write_split(dir: &Path, split: &SplitSpec, ids: &IdMap) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sets = [&split.train, &split.test_iid, &split.test_ood];
    let mut manifest = String::new();
    for ((key, file), set) in SPLIT_FILES.iter().zip(sets) {
        write_interactions(&dir.join(file), set, ids)?;
        manifest.push_str(&format!("{key} = {file}\n"));
    }
    write_id_map(&dir.join("id_map.tsv"), ids)?;
    manifest.push_str("id_map = id_map.tsv\n");
    manifest.push_str(&format!("ratio = {}\n", split.ratio));
    let manifest_path = dir.join("split.manifest");
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a split manifest and the files it names.
pub fn load_split(manifest_path: &Path) -> Result<(SplitSpec, IdMap)> {
    let text = read_to_string(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut entries = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(manifest_path, line_no, "expected key = value"))?;
        entries.insert(key.trim().to_string(), value.trim().to_string());
    }
    let lookup = |key: &str| -> Result<&str> {
        entries
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::parse(manifest_path, 1, format!("missing manifest key {key:?}")))
    };
    let ids = load_id_map(&dir.join(lookup("id_map")?))?;
    let train = load_interactions_with_map(&dir.join(lookup("train")?), &ids)?;
    let test_iid = load_interactions_with_map(&dir.join(lookup("test_iid")?), &ids)?;
    let test_ood = load_interactions_with_map(&dir.join(lookup("test_ood")?), &ids)?;
    let ratio: f64 = lookup("ratio")?
        .parse()
        .map_err(|_| Error::parse(manifest_path, 1, "non-numeric ratio"))?;
    Ok((
        SplitSpec {
            train,
            test_iid,
            test_ood,
            ratio,
        },
        ids,
    ))
}
