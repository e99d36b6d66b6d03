//! Item-item co-occurrence graph and similarity scores.
//!
//! `G[i][j]` counts the users who interacted with both `i` and `j`; the
//! diagonal holds each item's own degree (the co-occurrence matrix is the
//! Gram matrix of the user-item incidence). The similarity of `j` to `i` is
//!
//! ```text
//! s_ij = G_ij / (g_i - G_ii) * sqrt(g_i / g_j)
//! ```
//!
//! with `g_i` the row sum of `G`. Whenever a denominator vanishes the score
//! is defined as 0 and a diagnostic counter is incremented instead of
//! producing NaN.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};

/// Sparse symmetric co-occurrence graph with per-item neighbour lists.
#[derive(Debug)]
pub struct ItemGraph {
    num_items: usize,
    /// Off-diagonal counts keyed by `(min(i,j), max(i,j))`.
    counts: HashMap<(u32, u32), u32>,
    /// Diagonal counts, one per item.
    diag: Vec<u32>,
    /// Row sums of `G`, including the diagonal.
    row_sum: Vec<f64>,
    /// Per item: up to K `(neighbour, similarity)` pairs, best first.
    neighbors: Vec<Vec<(u32, f64)>>,
    /// How many similarity lookups hit a degenerate denominator.
    zero_denominator_hits: AtomicU64,
}

impl PartialEq for ItemGraph {
    fn eq(&self, other: &Self) -> bool {
        self.num_items == other.num_items
            && self.counts == other.counts
            && self.diag == other.diag
            && self.row_sum == other.row_sum
            && self.neighbors == other.neighbors
    }
}

impl ItemGraph {
    /// Builds the graph from the positives of `set` and keeps the best
    /// `top_k` neighbours per item.
    pub fn build(set: &InteractionSet, top_k: usize) -> Self {
        let num_items = set.num_items();
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        let mut diag = vec![0u32; num_items];
        let mut items: Vec<u32> = Vec::new();
        let mut user = None;
        let flush = |items: &mut Vec<u32>, counts: &mut HashMap<(u32, u32), u32>| {
            for a in 0..items.len() {
                for b in a + 1..items.len() {
                    *counts.entry((items[a], items[b])).or_insert(0) += 1;
                }
            }
            items.clear();
        };
        for (u, i) in set.positives() {
            if user != Some(u) {
                flush(&mut items, &mut counts);
                user = Some(u);
            }
            items.push(i);
            diag[i as usize] += 1;
        }
        flush(&mut items, &mut counts);
        Self::assemble(num_items, counts, diag, top_k)
    }

    /// Builds a graph from explicit counts: `(i, j, count)` entries with
    /// `i == j` setting the diagonal and `i != j` the symmetric off-diagonal.
    pub fn from_counts(
        num_items: usize,
        entries: &[(u32, u32, u32)],
        top_k: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        let mut diag = vec![0u32; num_items];
        for &(i, j, count) in entries {
            if i as usize >= num_items || j as usize >= num_items {
                return Err(Error::invalid(format!(
                    "count entry ({i},{j}) out of range for {num_items} items"
                )));
            }
            if i == j {
                diag[i as usize] = count;
            } else {
                let key = (i.min(j), i.max(j));
                counts.insert(key, count);
            }
        }
        Ok(Self::assemble(num_items, counts, diag, top_k))
    }

    fn assemble(
        num_items: usize,
        counts: HashMap<(u32, u32), u32>,
        diag: Vec<u32>,
        top_k: usize,
    ) -> Self {
        let mut row_sum: Vec<f64> = diag.iter().map(|&c| c as f64).collect();
        let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); num_items];
        for (&(a, b), &count) in &counts {
            row_sum[a as usize] += count as f64;
            row_sum[b as usize] += count as f64;
            adjacency[a as usize].push(b);
            adjacency[b as usize].push(a);
        }
        let mut graph = ItemGraph {
            num_items,
            counts,
            diag,
            row_sum,
            neighbors: Vec::new(),
            zero_denominator_hits: AtomicU64::new(0),
        };
        let mut neighbors = Vec::with_capacity(num_items);
        for (i, mut partners) in adjacency.into_iter().enumerate() {
            partners.sort_unstable();
            let mut scored: Vec<(u32, f64)> = partners
                .into_iter()
                .map(|j| (j, item_similarity(&graph, i as u32, j)))
                .collect();
            // Best similarity first; ties resolved by ascending item id
            // (which the pre-sort above already guarantees for stable sort).
            scored.sort_by(|x, y| y.1.total_cmp(&x.1));
            scored.truncate(top_k);
            neighbors.push(scored);
        }
        graph.neighbors = neighbors;
        graph
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Co-occurrence count `G_ij` (diagonal included).
    pub fn count(&self, i: u32, j: u32) -> u32 {
        if i == j {
            self.diag[i as usize]
        } else {
            *self.counts.get(&(i.min(j), i.max(j))).unwrap_or(&0)
        }
    }

    /// Row sum `g_i`.
    pub fn row_sum(&self, i: u32) -> f64 {
        self.row_sum[i as usize]
    }

    /// Top-K neighbour list of `i`, best similarity first.
    pub fn neighbors(&self, i: u32) -> &[(u32, f64)] {
        &self.neighbors[i as usize]
    }

    /// How many similarity evaluations were defined to 0 because of a
    /// degenerate denominator.
    pub fn zero_denominator_hits(&self) -> u64 {
        self.zero_denominator_hits.load(Ordering::Relaxed)
    }
}

/// Similarity of item `j` to item `i`; 0 (with a diagnostic count) when the
/// normalisation is degenerate.
pub fn item_similarity(graph: &ItemGraph, i: u32, j: u32) -> f64 {
    let g_i = graph.row_sum(i);
    let g_j = graph.row_sum(j);
    let off_diag = g_i - graph.diag[i as usize] as f64;
    if off_diag <= 0.0 || g_j <= 0.0 {
        graph.zero_denominator_hits.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    let count = graph.count(i, j) as f64;
    count / off_diag * (g_i / g_j).sqrt()
}
