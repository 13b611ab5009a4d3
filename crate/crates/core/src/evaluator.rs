//! Link-prediction ranking and MRR / Hits@N.
//!
//! Every test triple `(h, r, t)` is asked twice: as the tail query
//! `(h, r, ?)` and, through the inverse relation, as the head query
//! `(t, r⁻¹, ?)`. Ties count against the gold entity.

use std::fmt::Write as _;

use tsam_autodiff::ParamStore;

use crate::data::{Split, TripleStore};
use crate::error::{Error, Result};
use crate::model::Model;

pub const HITS_AT: [usize; 3] = [1, 3, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Tail,
    Head,
}

/// One ranked query. `relation` is the relation as asked, so head queries
/// carry an inverse id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankResult {
    pub head: usize,
    pub relation: usize,
    pub gold: usize,
    pub rank: usize,
    pub filtered: bool,
    pub direction: Direction,
}

/// `1 + #{c ≠ gold, c ∉ filter_out : ¬(score[c] < score[gold])}`.
pub fn rank_query<T: PartialOrd + Copy>(scores: &[T], gold: usize, filter_out: &[usize]) -> Result<usize> {
    if gold >= scores.len() {
        return Err(Error::Data(format!("gold {gold} outside {} candidates", scores.len())));
    }
    if filter_out.contains(&gold) {
        return Err(Error::Data(format!("gold entity {gold} is in the filter set")));
    }
    let mut skip = vec![false; scores.len()];
    for &f in filter_out {
        if let Some(s) = skip.get_mut(f) {
            *s = true;
        }
    }
    skip[gold] = true;
    let g = scores[gold];
    let above = scores
        .iter()
        .zip(&skip)
        .filter(|&(s, &skipped)| !skipped && !(*s < g))
        .count();
    Ok(1 + above)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RankSummary {
    pub count: usize,
    pub mrr: f64,
    /// Hits@1, Hits@3, Hits@10.
    pub hits: [f64; 3],
}

impl RankSummary {
    /// Reciprocal ranks are summed in ascending rank order, so the result
    /// depends only on the multiset of ranks.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return RankSummary::default();
        }
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        let n = sorted.len() as f64;
        let rr: f64 = sorted.iter().map(|&r| 1.0 / r as f64).sum();
        let hits = HITS_AT.map(|k| sorted.iter().filter(|&&r| r <= k).count() as f64 / n);
        RankSummary {
            count: sorted.len(),
            mrr: rr / n,
            hits,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub split: Split,
    pub filtered: bool,
    /// Both directions pooled.
    pub all: RankSummary,
    pub tail: RankSummary,
    pub head: RankSummary,
}

impl Metrics {
    pub fn from_results(split: Split, filtered: bool, results: &[RankResult]) -> Self {
        let ranks = |d: Option<Direction>| -> Vec<usize> {
            results
                .iter()
                .filter(|r| d.map_or(true, |d| r.direction == d))
                .map(|r| r.rank)
                .collect()
        };
        Metrics {
            split,
            filtered,
            all: RankSummary::from_ranks(&ranks(None)),
            tail: RankSummary::from_ranks(&ranks(Some(Direction::Tail))),
            head: RankSummary::from_ranks(&ranks(Some(Direction::Head))),
        }
    }

    pub fn mrr(&self) -> f64 {
        self.all.mrr
    }

    pub fn hits(&self, k: usize) -> Option<f64> {
        HITS_AT.iter().position(|&h| h == k).map(|i| self.all.hits[i])
    }

    fn setting(&self) -> &'static str {
        if self.filtered {
            "filtered"
        } else {
            "raw"
        }
    }

    /// Human-readable table.
    pub fn report(&self) -> String {
        let mut s = format!("{} split, {} ranking, {} queries\n", self.split, self.setting(), self.all.count);
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8} {:>8}", "", "MRR", "Hits@1", "Hits@3", "Hits@10");
        for (name, m) in [("tail", &self.tail), ("head", &self.head), ("mean", &self.all)] {
            let _ = writeln!(
                s,
                "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, m.mrr, m.hits[0], m.hits[1], m.hits[2]
            );
        }
        s
    }

    /// `key=value` lines for machine consumption.
    pub fn to_kv(&self) -> String {
        let mut s = format!("split={}\nsetting={}\nqueries={}\n", self.split, self.setting(), self.all.count);
        for (prefix, m) in [("", &self.all), ("tail.", &self.tail), ("head.", &self.head)] {
            let _ = writeln!(s, "{prefix}mrr={}", m.mrr);
            for (k, h) in HITS_AT.iter().zip(m.hits) {
                let _ = writeln!(s, "{prefix}hits@{k}={h}");
            }
        }
        s
    }
}

/// Ranked queries plus their metrics.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub results: Vec<RankResult>,
}

/// Every query of `split` as `(head, relation, gold, direction)`: tail
/// queries first, then the inverse head queries.
pub fn queries(store: &TripleStore, split: Split) -> Vec<(usize, usize, usize, Direction)> {
    let base = store.split(split);
    base.iter()
        .map(|t| (t.head, t.relation, t.tail, Direction::Tail))
        .chain(base.iter().map(|&t| {
            let inv = store.inverse(t);
            (inv.head, inv.relation, inv.tail, Direction::Head)
        }))
        .collect()
}

/// Ranks every query of `split` with scores from `score`, which receives
/// `(head, relation)` queries and returns one score row per query.
pub fn evaluate_with<F>(store: &TripleStore, split: Split, filtered: bool, mut score: F) -> Result<Evaluation>
where
    F: FnMut(&[(usize, usize)]) -> Result<Vec<Vec<f32>>>,
{
    let qs = queries(store, split);
    let asked: Vec<(usize, usize)> = qs.iter().map(|q| (q.0, q.1)).collect();
    let rows = if asked.is_empty() { Vec::new() } else { score(&asked)? };
    if rows.len() != qs.len() {
        return Err(Error::Data(format!("scorer returned {} rows for {} queries", rows.len(), qs.len())));
    }
    let mut results = Vec::with_capacity(qs.len());
    for (&(head, relation, gold, direction), scores) in qs.iter().zip(&rows) {
        if scores.len() != store.entity_count() {
            return Err(Error::Data(format!(
                "score row has {} entries for {} entities",
                scores.len(),
                store.entity_count()
            )));
        }
        let filter: Vec<usize> = if filtered {
            store
                .known_answers(head, relation)
                .iter()
                .copied()
                .filter(|&c| c != gold)
                .collect()
        } else {
            Vec::new()
        };
        results.push(RankResult {
            head,
            relation,
            gold,
            rank: rank_query(scores, gold, &filter)?,
            filtered,
            direction,
        });
    }
    Ok(Evaluation {
        metrics: Metrics::from_results(split, filtered, &results),
        results,
    })
}

pub fn evaluate(model: &Model, params: &ParamStore, store: &TripleStore, split: Split, filtered: bool) -> Result<Evaluation> {
    if !params.all_finite() {
        return Err(Error::Numeric("model parameters are not finite".into()));
    }
    let scorer = model.scorer(params)?;
    evaluate_with(store, split, filtered, |q| scorer.score(q))
}

/// One tab-separated line per query: head, relation, gold, rank, then every
/// candidate score.
pub fn dump_scores(eval: &Evaluation, scores: &[Vec<f32>]) -> String {
    let mut s = String::from("# head\trelation\tgold\trank\tscores...\n");
    for (r, row) in eval.results.iter().zip(scores) {
        let _ = write!(s, "{}\t{}\t{}\t{}", r.head, r.relation, r.gold, r.rank);
        for v in row {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}
