//! Top-K ranking evaluation: precision, recall, and NDCG.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::{ContentSource, ModelParams};
use crate::dataset::InteractionSet;
use crate::error::{Error, Result};

/// Ranks the catalogue for one user by score (descending, ties broken by
/// ascending item id), drops excluded items, and keeps the best `k`.
///
/// `scores[i]` is the score of item `i`; every entry must be finite.
pub fn rank_items<F>(scores: &[f64], mut exclude: F, k: usize) -> Result<Vec<u32>>
where
    F: FnMut(u32) -> bool,
{
    if k == 0 {
        return Err(Error::invalid("ranking depth k must be at least 1"));
    }
    if let Some(bad) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "ranking score".to_string(),
            index: bad,
        });
    }
    let mut candidates: Vec<u32> = (0..scores.len() as u32)
        .filter(|&i| !exclude(i))
        .collect();
    candidates.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("scores checked finite")
            .then_with(|| a.cmp(&b))
    });
    candidates.truncate(k);
    Ok(candidates)
}

/// Precision, recall, and NDCG of one ranked list at a single depth.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TopKMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Scores a ranked list against a relevance set at depth `k`.
///
/// Precision divides by `k` even when fewer items could be ranked; recall
/// divides by the number of relevant items; NDCG uses the discount
/// `1 / log2(rank + 1)` with the ideal normaliser summed over
/// `min(k, |relevant|)` positions. An empty relevance set scores zero.
pub fn topk_metrics(ranked: &[u32], relevant: &BTreeSet<u32>, k: usize) -> TopKMetrics {
    if relevant.is_empty() || k == 0 {
        return TopKMetrics::default();
    }
    let depth = ranked.len().min(k);
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked[..depth].iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 0..k.min(relevant.len()) {
        idcg += 1.0 / ((pos + 2) as f64).log2();
    }
    TopKMetrics {
        precision: hits as f64 / k as f64,
        recall: hits as f64 / relevant.len() as f64,
        ndcg: dcg / idcg,
    }
}

/// Macro-averaged ranking quality over the users of a test set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    /// Users that actually contributed (those with test positives).
    pub evaluated_users: usize,
}

/// One user's ranked list and its metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRanking {
    pub user: u32,
    /// Top items after exclusions, best first, at most `k` of them.
    pub items: Vec<u32>,
    pub metrics: TopKMetrics,
}

/// Full evaluation output: every qualifying user's ranking plus the
/// macro-averages.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub k: usize,
    pub users: Vec<UserRanking>,
    pub summary: MetricSummary,
}

/// Evaluates a scorer at depth `k`: for every user with at least one test
/// positive, the full catalogue minus the user's training positives is
/// ranked and scored against the test positives; metrics are averaged over
/// those users only.
pub fn evaluate<F>(
    train: &InteractionSet,
    test: &InteractionSet,
    k: usize,
    score: F,
) -> Result<MetricSummary>
where
    F: FnMut(u32, u32) -> Result<f64>,
{
    Ok(evaluate_detailed(train, test, k, score)?.summary)
}

/// Like [`evaluate`], but also returns every user's ranked list.
pub fn evaluate_detailed<F>(
    train: &InteractionSet,
    test: &InteractionSet,
    k: usize,
    mut score: F,
) -> Result<RankingResult>
where
    F: FnMut(u32, u32) -> Result<f64>,
{
    if train.num_users() != test.num_users() || train.num_items() != test.num_items() {
        return Err(Error::invalid(format!(
            "train space {}x{} does not match test space {}x{}",
            train.num_users(),
            train.num_items(),
            test.num_users(),
            test.num_items()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("ranking depth k must be at least 1"));
    }
    let num_items = train.num_items();
    let mut relevant: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); train.num_users()];
    for (u, i) in test.positives() {
        relevant[u as usize].insert(i);
    }
    let mut sums = TopKMetrics::default();
    let mut users = Vec::new();
    let mut scores = vec![0.0; num_items];
    for (u, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        let user = u as u32;
        for (i, slot) in scores.iter_mut().enumerate() {
            *slot = score(user, i as u32)?;
        }
        let ranked = rank_items(&scores, |i| train.is_positive(user, i), k)?;
        let m = topk_metrics(&ranked, rel, k);
        sums.precision += m.precision;
        sums.recall += m.recall;
        sums.ndcg += m.ndcg;
        users.push(UserRanking {
            user,
            items: ranked,
            metrics: m,
        });
    }
    if users.is_empty() {
        return Err(Error::invalid(
            "no user has test positives; nothing to evaluate",
        ));
    }
    let n = users.len() as f64;
    let summary = MetricSummary {
        precision: sums.precision / n,
        recall: sums.recall / n,
        ndcg: sums.ndcg / n,
        evaluated_users: users.len(),
    };
    Ok(RankingResult { k, users, summary })
}

/// Adapts a model plus a content source into the scoring closure
/// [`evaluate`] expects.
pub fn model_scorer<'a, C: ContentSource>(
    params: &'a ModelParams,
    content: &'a C,
) -> impl FnMut(u32, u32) -> Result<f64> + 'a {
    let mut buf = vec![0.0; content.dim()];
    move |user, item| {
        content.content_into(user, item, &mut buf);
        params.score(user, item, &buf)
    }
}

/// One line of a metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub split: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

/// Expands a summary into `precision` / `recall` / `ndcg` rows for a split.
pub fn summary_rows(split: &str, k: usize, summary: &MetricSummary) -> Vec<MetricRow> {
    [
        ("precision", summary.precision),
        ("recall", summary.recall),
        ("ndcg", summary.ndcg),
    ]
    .into_iter()
    .map(|(metric, value)| MetricRow {
        split: split.to_string(),
        metric: metric.to_string(),
        k,
        value,
    })
    .collect()
}

/// Writes `split<TAB>metric<TAB>K<TAB>value` lines, values with six
/// fractional digits.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        writeln!(out, "{}\t{}\t{}\t{:.6}", row.split, row.metric, row.k, row.value)
            .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a metrics table back.
pub fn load_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let k: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad depth {:?}", fields[2])))?;
        let value: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad value {:?}", fields[3])))?;
        rows.push(MetricRow {
            split: fields[0].to_string(),
            metric: fields[1].to_string(),
            k,
            value,
        });
    }
    Ok(rows)
}
