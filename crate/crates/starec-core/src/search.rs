//! Relevance search over user histories and over the user population.
//!
//! Item search scores each pre-target history item against the target:
//! hard scoring is an exact category match (0 same / -2 different, the
//! negated L1 distance of one-hot categories), soft scoring is the
//! cosine of learned category embeddings, and adaptive scoring combines
//! both: `-sgn(|c'-c|)/(1-tau) + softmax_tau(cos)` with the softmax
//! normalized over the full pre-target history. The hard term's
//! magnitude 1/(1-tau) > 1 dominates the soft share in (0,1), so
//! same-category candidates always outrank different-category ones;
//! annealing tau toward 0 shrinks that dominance margin's scale while
//! sharpening the soft distribution.
//!
//! User search works the same way on c^u counts (how many of a user's
//! pre-target events share the target's category) and user-embedding
//! cosines. Candidates come from count buckets near the anchor's count
//! rather than the whole population, which keeps per-pair cost flat.

use crate::data::{Dataset, Interaction, Task, UserHistory, UserId};
use crate::encoder::FieldEmbeddings;
use crate::params::ParameterStore;
use crate::tape::{cosine_value, softmax_with_temperature};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("temperature must be in (0,1), got {0}")]
    BadTemperature(f64),
    #[error("recent_fraction must be in [0,1], got {0}")]
    BadRecentFraction(f64),
    #[error("sequence budget must be at least 2, got {0}")]
    BadSeqLen(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Hard,
    Soft,
    Adaptive,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Hard-search admission threshold for items.
    pub epsilon: f64,
    /// Hard-search admission threshold for users.
    pub eta: f64,
    /// Item search temperature.
    pub tau: f64,
    /// User search temperature.
    pub iota: f64,
    /// Total sequence budget (recent + searched).
    pub seq_len: usize,
    /// Fraction of the budget filled by most-recent events.
    pub recent_fraction: f64,
    /// Number of similar users retrieved per pair.
    pub n_similar_users: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            mode: SearchMode::Adaptive,
            epsilon: 0.0,
            eta: 0.0,
            tau: 0.99,
            iota: 0.99,
            seq_len: 30,
            recent_fraction: 0.5,
            n_similar_users: 2,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(SearchError::BadTemperature(self.tau));
        }
        if !(self.iota > 0.0 && self.iota < 1.0) {
            return Err(SearchError::BadTemperature(self.iota));
        }
        if !(0.0..=1.0).contains(&self.recent_fraction) {
            return Err(SearchError::BadRecentFraction(self.recent_fraction));
        }
        if self.seq_len < 2 {
            return Err(SearchError::BadSeqLen(self.seq_len));
        }
        Ok(())
    }

    pub fn recent_budget(&self) -> usize {
        ((self.recent_fraction * self.seq_len as f64).ceil() as usize).min(self.seq_len)
    }
}

/// Read-only view of the embeddings the search needs.
pub struct EmbeddingView<'a> {
    pub store: &'a ParameterStore,
    pub item_encoder: &'a FieldEmbeddings,
    pub user_encoder: &'a FieldEmbeddings,
}

impl<'a> EmbeddingView<'a> {
    /// Learned category embedding (first item feature field).
    pub fn category_embedding(&self, category: u32) -> &[f64] {
        self.item_encoder.field_row(self.store, 0, category)
    }

    pub fn user_embedding(&self, features: &[u32]) -> Vec<f64> {
        self.user_encoder
            .encode_value(self.store, features)
            .expect("user features validated at load")
    }
}

fn hard_score(same: bool) -> f64 {
    // negated L1 distance of one-hot category vectors
    if same {
        0.0
    } else {
        -2.0
    }
}

/// Per-candidate scores for one (history, target) pair.
///
/// Adaptive soft shares are normalized over the whole `pool`, so they
/// sum to 1 across it.
pub fn score_items(
    pool: &[Interaction],
    target: &Interaction,
    config: &SearchConfig,
    view: &EmbeddingView,
) -> Vec<f64> {
    match config.mode {
        SearchMode::Hard => pool
            .iter()
            .map(|c| hard_score(c.category_id == target.category_id))
            .collect(),
        SearchMode::Soft => {
            let te = view.category_embedding(target.category_id);
            pool.iter()
                .map(|c| cosine_value(view.category_embedding(c.category_id), te))
                .collect()
        }
        SearchMode::Adaptive => {
            let te = view.category_embedding(target.category_id);
            let cosines: Vec<f64> = pool
                .iter()
                .map(|c| cosine_value(view.category_embedding(c.category_id), te))
                .collect();
            let shares = softmax_with_temperature(&cosines, config.tau);
            pool.iter()
                .zip(shares)
                .map(|(c, share)| {
                    let hard = if c.category_id == target.category_id {
                        0.0
                    } else {
                        -1.0 / (1.0 - config.tau)
                    };
                    hard + share
                })
                .collect()
        }
    }
}

/// Item lists retrieved for one (user, target) pair.
#[derive(Debug, Clone)]
pub struct ItemRetrieval {
    /// Most recent pre-target events, chronological, left-padded.
    pub recent: Vec<Option<Interaction>>,
    /// Search-selected remaining events, chronological, left-padded.
    pub searched: Vec<Option<Interaction>>,
    /// True when the pre-target history was empty.
    pub empty_history: bool,
}

fn left_pad(items: Vec<Interaction>, budget: usize) -> Vec<Option<Interaction>> {
    let mut out: Vec<Option<Interaction>> = Vec::with_capacity(budget);
    for _ in items.len()..budget {
        out.push(None);
    }
    out.extend(items.into_iter().map(Some));
    out
}

/// Retrieve the recent window plus search-selected items from the
/// events strictly before the target. The two lists partition the
/// budget exactly; shorter histories are left-padded.
pub fn retrieve_items(
    pre_target: &[Interaction],
    target: &Interaction,
    config: &SearchConfig,
    view: &EmbeddingView,
) -> ItemRetrieval {
    let recent_budget = config.recent_budget();
    let searched_budget = config.seq_len - recent_budget;

    let recent_start = pre_target.len().saturating_sub(recent_budget);
    let recent: Vec<Interaction> = pre_target[recent_start..].to_vec();

    let searched = if searched_budget == 0 || recent_start == 0 {
        Vec::new()
    } else {
        // softmax pool spans the full pre-target history; selection is
        // over the non-recent remainder
        let scores = score_items(pre_target, target, config, view);
        let mut candidates: Vec<usize> = (0..recent_start).collect();
        if config.mode == SearchMode::Hard {
            candidates.retain(|&i| scores[i] >= config.epsilon);
        }
        // ties broken by recency (larger index wins)
        candidates.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        });
        candidates.truncate(searched_budget);
        candidates.sort_unstable(); // restore chronological order
        candidates.into_iter().map(|i| pre_target[i].clone()).collect()
    };

    debug_assert!(recent.iter().all(|e| e.timestamp <= target.timestamp));
    ItemRetrieval {
        empty_history: pre_target.is_empty(),
        recent: left_pad(recent, recent_budget),
        searched: left_pad(searched, searched_budget),
    }
}

/// Buckets users by full-history category counts for candidate
/// generation, with per-user per-category sorted timestamps for exact
/// pre-target counts.
pub struct UserSearchIndex {
    /// Per history index: category -> sorted event timestamps.
    cat_times: Vec<BTreeMap<u32, Vec<u64>>>,
    /// category -> count -> history indices sorted by last activity
    /// (most recent first).
    buckets: BTreeMap<u32, BTreeMap<u32, Vec<usize>>>,
    last_ts: Vec<u64>,
}

impl UserSearchIndex {
    pub fn build(dataset: &Dataset) -> Self {
        let n = dataset.n_users();
        let mut cat_times: Vec<BTreeMap<u32, Vec<u64>>> = vec![BTreeMap::new(); n];
        let mut last_ts = vec![0u64; n];
        for (i, h) in dataset.histories().iter().enumerate() {
            for e in &h.events {
                cat_times[i].entry(e.category_id).or_default().push(e.timestamp);
            }
            // events are sorted, so the per-category lists already are
            last_ts[i] = h.events.last().map(|e| e.timestamp).unwrap_or(0);
        }
        let mut buckets: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        for (i, times) in cat_times.iter().enumerate() {
            for (&cat, ts) in times {
                buckets
                    .entry(cat)
                    .or_default()
                    .entry(ts.len() as u32)
                    .or_default()
                    .push(i);
            }
        }
        for by_count in buckets.values_mut() {
            for users in by_count.values_mut() {
                users.sort_by(|&a, &b| last_ts[b].cmp(&last_ts[a]).then(a.cmp(&b)));
            }
        }
        UserSearchIndex {
            cat_times,
            buckets,
            last_ts,
        }
    }

    /// Number of events in `user`'s history with the given category and
    /// timestamp strictly before `cutoff`.
    pub fn count_before(&self, user_idx: usize, category: u32, cutoff: u64) -> u32 {
        match self.cat_times[user_idx].get(&category) {
            Some(ts) => ts.partition_point(|&t| t < cutoff) as u32,
            None => 0,
        }
    }

    fn candidates(&self, category: u32, anchor_count: u32, cap: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let Some(by_count) = self.buckets.get(&category) else {
            return out;
        };
        // anchor bucket first, then the neighbors by distance
        let offsets: [i64; 5] = [0, -1, 1, -2, 2];
        for off in offsets {
            let c = anchor_count as i64 + off;
            if c < 0 {
                continue;
            }
            if let Some(users) = by_count.get(&(c as u32)) {
                for &u in users {
                    out.push(u);
                    if out.len() >= cap {
                        return out;
                    }
                }
            }
        }
        out
    }
}

/// One retrieved similar user with their search-selected items.
#[derive(Debug, Clone)]
pub struct SimilarUser {
    pub user_id: UserId,
    /// Full-budget searched list (chronological, left-padded).
    pub items: Vec<Option<Interaction>>,
}

// Candidate pools stay small multiples of the retrieval size.
fn candidate_cap(m_hat: usize) -> usize {
    (4 * m_hat).max(24)
}

/// Top similar users for an anchor/target pair, each paired with item
/// search over their own history. Slots beyond the qualifying users
/// are padded with `None`.
pub fn retrieve_similar_users(
    anchor_idx: usize,
    target: &Interaction,
    dataset: &Dataset,
    index: &UserSearchIndex,
    config: &SearchConfig,
    view: &EmbeddingView,
) -> Vec<Option<SimilarUser>> {
    let m_hat = config.n_similar_users;
    if m_hat == 0 {
        return Vec::new();
    }
    let anchor = dataset.by_index(anchor_idx);
    let anchor_count = index.count_before(anchor_idx, target.category_id, target.timestamp);
    let candidates = index.candidates(target.category_id, anchor_count, candidate_cap(m_hat));

    struct Scored {
        idx: usize,
        score: f64,
        count: u32,
    }
    let mut pool: Vec<Scored> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if cand == anchor_idx {
            continue;
        }
        let count = index.count_before(cand, target.category_id, target.timestamp);
        pool.push(Scored {
            idx: cand,
            score: 0.0,
            count,
        });
    }

    match config.mode {
        SearchMode::Hard => {
            for s in &mut pool {
                s.score = hard_score(s.count == anchor_count);
            }
            pool.retain(|s| s.score >= config.eta);
        }
        SearchMode::Soft | SearchMode::Adaptive => {
            let anchor_emb = view.user_embedding(&anchor.events.last().map(|e| e.user_features.clone()).unwrap_or_else(|| vec![anchor.user_id]));
            let cosines: Vec<f64> = pool
                .iter()
                .map(|s| {
                    let h = dataset.by_index(s.idx);
                    let feats = h
                        .events
                        .last()
                        .map(|e| e.user_features.clone())
                        .unwrap_or_else(|| vec![h.user_id]);
                    cosine_value(&view.user_embedding(&feats), &anchor_emb)
                })
                .collect();
            if config.mode == SearchMode::Soft {
                for (s, c) in pool.iter_mut().zip(cosines) {
                    s.score = c;
                }
            } else {
                let shares = softmax_with_temperature(&cosines, config.iota);
                for (s, share) in pool.iter_mut().zip(shares) {
                    let hard = if s.count == anchor_count {
                        0.0
                    } else {
                        -1.0 / (1.0 - config.iota)
                    };
                    s.score = hard + share;
                }
            }
        }
    }

    // score desc, then last-activity recency, then user id
    pool.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(index.last_ts[b.idx].cmp(&index.last_ts[a.idx]))
            .then(dataset.by_index(a.idx).user_id.cmp(&dataset.by_index(b.idx).user_id))
    });
    pool.truncate(m_hat);

    let mut searched_cfg = config.clone();
    searched_cfg.recent_fraction = 0.0; // similar users contribute searched lists only
    let mut out: Vec<Option<SimilarUser>> = pool
        .into_iter()
        .map(|s| {
            let h = dataset.by_index(s.idx);
            let cutoff = h
                .events
                .partition_point(|e| e.timestamp < target.timestamp);
            let retrieval = retrieve_items(&h.events[..cutoff], target, &searched_cfg, view);
            Some(SimilarUser {
                user_id: h.user_id,
                items: retrieval.searched,
            })
        })
        .collect();
    out.resize_with(m_hat, || None);
    out
}

/// Everything the sequence model consumes for one (user, target) pair.
#[derive(Debug, Clone)]
pub struct RetrievedContext {
    pub anchor_user: UserId,
    pub recent: Vec<Option<Interaction>>,
    pub searched: Vec<Option<Interaction>>,
    pub similar: Vec<Option<SimilarUser>>,
    pub target: Interaction,
    pub empty_history: bool,
}

/// Build the full retrieval context for a split task.
pub fn build_context(
    dataset: &Dataset,
    index: &UserSearchIndex,
    task: Task,
    config: &SearchConfig,
    view: &EmbeddingView,
) -> RetrievedContext {
    let anchor_idx = dataset
        .index_of(task.user_id)
        .expect("task references a known user");
    let history: &UserHistory = dataset.by_index(anchor_idx);
    let target = history.events[task.target_pos].clone();
    let pre_target = &history.events[..task.target_pos];
    let items = retrieve_items(pre_target, &target, config, view);
    let similar = retrieve_similar_users(anchor_idx, &target, dataset, index, config, view);
    RetrievedContext {
        anchor_user: task.user_id,
        recent: items.recent,
        searched: items.searched,
        similar,
        target,
        empty_history: items.empty_history,
    }
}

/// Context for a target item that is not part of the stored history
/// (serving-time scoring): everything before `target.timestamp` is
/// usable context.
pub fn build_context_for_target(
    dataset: &Dataset,
    index: &UserSearchIndex,
    anchor_idx: usize,
    target: Interaction,
    config: &SearchConfig,
    view: &EmbeddingView,
) -> RetrievedContext {
    let history = dataset.by_index(anchor_idx);
    let cutoff = history
        .events
        .partition_point(|e| e.timestamp < target.timestamp);
    let pre_target = &history.events[..cutoff];
    let items = retrieve_items(pre_target, &target, config, view);
    let similar = retrieve_similar_users(anchor_idx, &target, dataset, index, config, view);
    RetrievedContext {
        anchor_user: history.user_id,
        recent: items.recent,
        searched: items.searched,
        similar,
        target,
        empty_history: items.empty_history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_view;
    use crate::model::Model;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn inter(user: u32, item: u32, cat: u32, ts: u64) -> Interaction {
        Interaction::simple(user, item, cat, ts, 0)
    }

    fn dataset_of(histories: Vec<(u32, Vec<Interaction>)>) -> Dataset {
        Dataset::from_histories(
            histories
                .into_iter()
                .map(|(u, evs)| {
                    let n = evs.len();
                    UserHistory::new(u, evs, n)
                })
                .collect(),
        )
    }

    #[test]
    fn hard_scores_are_zero_or_minus_two() {
        let (model, _ds) = Model::tiny_fixture(3, 2);
        let view = tiny_view(&model);
        let target = inter(0, 1, 1, 100);
        let pool = vec![inter(0, 2, 1, 1), inter(0, 3, 0, 2)];
        let cfg = SearchConfig {
            mode: SearchMode::Hard,
            ..Default::default()
        };
        let scores = score_items(&pool, &target, &cfg, &view);
        assert_eq!(scores, vec![0.0, -2.0]);
    }

    #[test]
    fn adaptive_different_category_is_below_minus_99() {
        let (model, _ds) = Model::tiny_fixture(3, 2);
        let view = tiny_view(&model);
        let target = inter(0, 1, 1, 100);
        let pool = vec![inter(0, 2, 0, 1), inter(0, 3, 1, 2)];
        let cfg = SearchConfig {
            mode: SearchMode::Adaptive,
            tau: 0.99,
            ..Default::default()
        };
        let scores = score_items(&pool, &target, &cfg, &view);
        assert!(scores[0] < -99.0, "got {}", scores[0]);
        assert!(scores[1] > -1.0);
        // soft shares over the pool sum to one
        let hard_terms = [-100.0, 0.0];
        let share_sum: f64 = scores
            .iter()
            .zip(hard_terms)
            .map(|(s, h)| s - h)
            .sum();
        assert!((share_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn soft_self_category_cosine_is_one() {
        let (model, _ds) = Model::tiny_fixture(3, 2);
        let view = tiny_view(&model);
        let target = inter(0, 1, 1, 100);
        let pool = vec![inter(0, 2, 1, 1)];
        let cfg = SearchConfig {
            mode: SearchMode::Soft,
            ..Default::default()
        };
        let scores = score_items(&pool, &target, &cfg, &view);
        assert!((scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_embedding_scores_zero() {
        assert_eq!(cosine_value(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn hard_retrieval_returns_exactly_matching_items() {
        let (model, _ds) = Model::tiny_fixture(8, 3);
        let view = tiny_view(&model);
        let target = inter(0, 1, 2, 100);
        let history: Vec<Interaction> = vec![
            inter(0, 2, 2, 1),
            inter(0, 3, 0, 2),
            inter(0, 4, 2, 3),
            inter(0, 5, 1, 4),
            inter(0, 6, 2, 5),
        ];
        let cfg = SearchConfig {
            mode: SearchMode::Hard,
            epsilon: 0.0,
            seq_len: 3,
            recent_fraction: 0.0,
            ..Default::default()
        };
        let got = retrieve_items(&history, &target, &cfg, &view);
        let items: Vec<u32> = got.searched.iter().flatten().map(|e| e.item_id).collect();
        assert_eq!(items, vec![2, 4, 6]);
    }

    #[test]
    fn recent_fraction_one_leaves_search_empty() {
        let (model, _ds) = Model::tiny_fixture(8, 3);
        let view = tiny_view(&model);
        let target = inter(0, 1, 2, 100);
        let history: Vec<Interaction> =
            (0..6).map(|i| inter(0, i + 2, 0, i as u64 + 1)).collect();
        let cfg = SearchConfig {
            seq_len: 4,
            recent_fraction: 1.0,
            ..Default::default()
        };
        let got = retrieve_items(&history, &target, &cfg, &view);
        assert!(got.searched.is_empty());
        let items: Vec<u32> = got.recent.iter().flatten().map(|e| e.item_id).collect();
        assert_eq!(items, vec![4, 5, 6, 7]);
    }

    #[test]
    fn score_ties_pick_the_more_recent() {
        let (model, _ds) = Model::tiny_fixture(8, 3);
        let view = tiny_view(&model);
        let target = inter(0, 1, 2, 100);
        // two same-category candidates tie on hard score; budget 1
        let history = vec![inter(0, 2, 2, 1), inter(0, 3, 2, 7)];
        let cfg = SearchConfig {
            mode: SearchMode::Hard,
            seq_len: 2,
            recent_fraction: 0.0,
            ..Default::default()
        };
        let got = retrieve_items(&history, &target, &cfg, &view);
        let items: Vec<u32> = got.searched.iter().flatten().map(|e| e.item_id).collect();
        // budget is 2 here; shrink to 1 by checking the top pick order
        assert_eq!(items, vec![2, 3]);
        let cfg1 = SearchConfig {
            mode: SearchMode::Hard,
            seq_len: 2,
            recent_fraction: 0.5,
            ..cfg
        };
        let got = retrieve_items(&history, &target, &cfg1, &view);
        let searched: Vec<u32> = got.searched.iter().flatten().map(|e| e.item_id).collect();
        // item 3 went to the recent window; only item 2 remains for search
        assert_eq!(searched, vec![2]);
    }

    #[test]
    fn empty_history_is_all_padding_and_flagged() {
        let (model, _ds) = Model::tiny_fixture(4, 2);
        let view = tiny_view(&model);
        let target = inter(0, 1, 1, 100);
        let cfg = SearchConfig::default();
        let got = retrieve_items(&[], &target, &cfg, &view);
        assert!(got.empty_history);
        assert_eq!(got.recent.len() + got.searched.len(), cfg.seq_len);
        assert!(got.recent.iter().all(Option::is_none));
        assert!(got.searched.iter().all(Option::is_none));
    }

    #[test]
    fn budget_is_exact_for_any_fraction() {
        let (model, _ds) = Model::tiny_fixture(8, 3);
        let view = tiny_view(&model);
        let target = inter(0, 1, 2, 100);
        let history: Vec<Interaction> =
            (0..10).map(|i| inter(0, i + 2, i % 3, i as u64 + 1)).collect();
        for rf in [0.0, 0.25, 0.33, 0.5, 0.75, 1.0] {
            let cfg = SearchConfig {
                seq_len: 7,
                recent_fraction: rf,
                ..Default::default()
            };
            let got = retrieve_items(&history, &target, &cfg, &view);
            assert_eq!(got.recent.len() + got.searched.len(), 7);
            // no overlap between recent and searched
            let r: Vec<u32> = got.recent.iter().flatten().map(|e| e.item_id).collect();
            let s: Vec<u32> = got.searched.iter().flatten().map(|e| e.item_id).collect();
            for i in &s {
                assert!(!r.contains(i));
            }
        }
    }

    #[test]
    fn same_category_always_outranks_different_adaptive() {
        let (model, _ds) = Model::tiny_fixture(30, 6);
        let view = tiny_view(&model);
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        for &tau in &[0.99, 0.5, 0.01] {
            for _ in 0..40 {
                let target = inter(0, 1, rng.random_range(0..6), 1000);
                let pool: Vec<Interaction> = (0..rng.random_range(2..30))
                    .map(|i| inter(0, i + 2, rng.random_range(0..6), i as u64))
                    .collect();
                let cfg = SearchConfig {
                    mode: SearchMode::Adaptive,
                    tau,
                    ..Default::default()
                };
                let scores = score_items(&pool, &target, &cfg, &view);
                let mut min_same = f64::INFINITY;
                let mut max_diff = f64::NEG_INFINITY;
                for (e, s) in pool.iter().zip(&scores) {
                    if e.category_id == target.category_id {
                        min_same = min_same.min(*s);
                    } else {
                        max_diff = max_diff.max(*s);
                    }
                }
                if min_same.is_finite() && max_diff.is_finite() {
                    assert!(min_same > max_diff, "tau={}: {} <= {}", tau, min_same, max_diff);
                }
            }
        }
    }

    #[test]
    fn user_hard_score_equal_counts() {
        // two users with identical pre-target category counts
        let ds = dataset_of(vec![
            (0, vec![inter(0, 1, 5, 1), inter(0, 2, 5, 2), inter(0, 3, 5, 3), inter(0, 9, 1, 4)]),
            (1, vec![inter(1, 4, 5, 1), inter(1, 5, 5, 2), inter(1, 6, 5, 3)]),
            (2, vec![inter(2, 7, 5, 1)]),
        ]);
        let index = UserSearchIndex::build(&ds);
        let (model, _) = Model::tiny_fixture(12, 6);
        let view = tiny_view(&model);
        let target = inter(0, 8, 5, 10);
        let cfg = SearchConfig {
            mode: SearchMode::Hard,
            eta: 0.0,
            n_similar_users: 3,
            ..Default::default()
        };
        let sims = retrieve_similar_users(0, &target, &ds, &index, &cfg, &view);
        let ids: Vec<u32> = sims.iter().flatten().map(|s| s.user_id).collect();
        // only user 1 matches the anchor's count of 3; user 2 has count 1
        assert_eq!(ids, vec![1]);
        assert_eq!(sims.len(), 3); // padded to the requested width
    }

    #[test]
    fn user_adaptive_mismatched_counts_below_minus_99() {
        let ds = dataset_of(vec![
            (
                0,
                (0..3).map(|i| inter(0, i, 5, i as u64 + 1)).collect(),
            ),
            (
                1,
                (0..4).map(|i| inter(1, i + 10, 5, i as u64 + 1)).collect(),
            ),
        ]);
        let index = UserSearchIndex::build(&ds);
        let (model, _) = Model::tiny_fixture(20, 6);
        let view = tiny_view(&model);
        let target = inter(0, 8, 5, 10);
        let anchor_count = index.count_before(0, 5, 10);
        let cand_count = index.count_before(1, 5, 10);
        assert_eq!((anchor_count, cand_count), (3, 4));
        let cfg = SearchConfig {
            mode: SearchMode::Adaptive,
            iota: 0.99,
            n_similar_users: 1,
            ..Default::default()
        };
        let sims = retrieve_similar_users(0, &target, &ds, &index, &cfg, &view);
        // user 1 is retrieved (only candidate) but its score was dominated
        // by the hard penalty; any pool of two keeps each share below 1,
        // so a mismatched count lands strictly below -99
        assert_eq!(sims.iter().flatten().count(), 1);
        let shares = softmax_with_temperature(&[1.0, 0.4], 0.99);
        let score = -1.0 / (1.0 - 0.99) + shares[0];
        assert!(score < -99.0);
    }

    #[test]
    fn population_of_one_yields_no_similar_users() {
        let ds = dataset_of(vec![(
            0,
            (0..3).map(|i| inter(0, i, 5, i as u64 + 1)).collect(),
        )]);
        let index = UserSearchIndex::build(&ds);
        let (model, _) = Model::tiny_fixture(10, 6);
        let view = tiny_view(&model);
        let target = inter(0, 8, 5, 10);
        let cfg = SearchConfig {
            n_similar_users: 2,
            ..Default::default()
        };
        let sims = retrieve_similar_users(0, &target, &ds, &index, &cfg, &view);
        assert_eq!(sims.iter().flatten().count(), 0);
        assert_eq!(sims.len(), 2);
    }

    #[test]
    fn zero_similar_users_disables_the_feature() {
        let ds = dataset_of(vec![(
            0,
            (0..3).map(|i| inter(0, i, 5, i as u64 + 1)).collect(),
        )]);
        let index = UserSearchIndex::build(&ds);
        let (model, _) = Model::tiny_fixture(10, 6);
        let view = tiny_view(&model);
        let target = inter(0, 8, 5, 10);
        let cfg = SearchConfig {
            n_similar_users: 0,
            ..Default::default()
        };
        assert!(retrieve_similar_users(0, &target, &ds, &index, &cfg, &view).is_empty());
    }

    #[test]
    fn retrieved_items_never_reach_the_target_timestamp() {
        let (model, ds) = Model::tiny_fixture(40, 4);
        let view = tiny_view(&model);
        let index = UserSearchIndex::build(&ds);
        let split = crate::data::temporal_split(&ds);
        for task in split.split.train.iter().take(10) {
            let ctx = build_context(&ds, &index, *task, &SearchConfig::default(), &view);
            for e in ctx.recent.iter().chain(&ctx.searched).flatten() {
                assert!(e.timestamp <= ctx.target.timestamp);
            }
            for s in ctx.similar.iter().flatten() {
                for e in s.items.iter().flatten() {
                    assert!(e.timestamp < ctx.target.timestamp);
                }
            }
        }
    }
}
