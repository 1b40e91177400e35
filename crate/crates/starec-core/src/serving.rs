//! Deployment layer: a two-level user -> category -> postings index,
//! query/demand to category mapping, category-relevance precomputation,
//! top-K recommendation, and delayed-feedback label imputation.
//!
//! Rebuilds publish a fresh immutable snapshot behind an atomic swap;
//! a reader that cloned the snapshot handle keeps a consistent version
//! for as long as it holds it.

use crate::data::{Dataset, Interaction, UserId};
use crate::model::{LabelChannel, LabelVal, Model, ModelError, NoisePlan};
use crate::search::{build_context_for_target, EmbeddingView, SearchConfig, UserSearchIndex};
use crate::tape::{cosine_value, softmax_with_temperature};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};
use std::sync::{Arc, RwLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index format: {0}")]
    Format(String),
}

/// One stored event: enough to rebuild retrieval contexts at serve time.
#[derive(Debug, Clone, PartialEq)]
pub struct Posting {
    pub item_id: u32,
    pub timestamp: u64,
    pub label: LabelState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelState {
    Observed(u8),
    /// Feedback not yet logged.
    Missing,
    /// Model-imputed click probability.
    Imputed(f64),
}

/// Immutable index contents for one version.
#[derive(Debug, Clone)]
pub struct IndexSnapshot {
    pub version: u64,
    /// user -> category -> time-sorted postings.
    pub users: BTreeMap<UserId, BTreeMap<u32, Vec<Posting>>>,
    /// category -> related categories (relevance order).
    pub relevance: BTreeMap<u32, Vec<u32>>,
}

impl IndexSnapshot {
    pub fn categories_of(&self, user: UserId) -> Vec<u32> {
        self.users
            .get(&user)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }
}

/// Shared handle: many readers, one rebuilding writer.
#[derive(Clone)]
pub struct ServingIndex {
    current: Arc<RwLock<Arc<IndexSnapshot>>>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ServingConfig {
    /// Admission threshold for the precomputed category-relevance lists.
    pub relevance_epsilon: f64,
    /// Temperature used for the relevance precomputation (the final
    /// annealed value in a trained model).
    pub relevance_tau: f64,
    /// Recent-event window consulted when a request has no query.
    pub query_fallback_window: usize,
}

impl Default for ServingConfig {
    fn default() -> Self {
        ServingConfig {
            relevance_epsilon: 0.0,
            relevance_tau: 0.01,
            query_fallback_window: 5,
        }
    }
}

/// Adaptive relatedness of every category pair at a fixed temperature:
/// same category scores 0 + softmax share, different categories are
/// pushed down by the hard term; categories with score >= epsilon make
/// the relevance list.
fn relevance_table(
    n_categories: u32,
    view: &EmbeddingView,
    cfg: &ServingConfig,
) -> BTreeMap<u32, Vec<u32>> {
    let mut out = BTreeMap::new();
    for c in 0..n_categories {
        let anchor = view.category_embedding(c).to_vec();
        let cosines: Vec<f64> = (0..n_categories)
            .map(|c2| cosine_value(view.category_embedding(c2), &anchor))
            .collect();
        let shares = softmax_with_temperature(&cosines, cfg.relevance_tau);
        let mut scored: Vec<(f64, u32)> = (0..n_categories)
            .map(|c2| {
                let hard = if c2 == c {
                    0.0
                } else {
                    -1.0 / (1.0 - cfg.relevance_tau)
                };
                (hard + shares[c2 as usize], c2)
            })
            .filter(|(s, _)| *s >= cfg.relevance_epsilon)
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        out.insert(c, scored.into_iter().map(|(_, c2)| c2).collect());
    }
    out
}

impl ServingIndex {
    /// Build the first version from a history collection.
    pub fn build(
        dataset: &Dataset,
        n_categories: u32,
        view: &EmbeddingView,
        cfg: &ServingConfig,
    ) -> Self {
        let snapshot = Self::snapshot_from(dataset, n_categories, view, cfg, 1);
        ServingIndex {
            current: Arc::new(RwLock::new(Arc::new(snapshot))),
        }
    }

    fn snapshot_from(
        dataset: &Dataset,
        n_categories: u32,
        view: &EmbeddingView,
        cfg: &ServingConfig,
        version: u64,
    ) -> IndexSnapshot {
        let mut users: BTreeMap<UserId, BTreeMap<u32, Vec<Posting>>> = BTreeMap::new();
        for h in dataset.histories() {
            let per_cat = users.entry(h.user_id).or_default();
            for e in &h.events {
                per_cat.entry(e.category_id).or_default().push(Posting {
                    item_id: e.item_id,
                    timestamp: e.timestamp,
                    label: LabelState::Observed(e.label),
                });
            }
            // events arrive time-sorted, so each postings list already is
        }
        IndexSnapshot {
            version,
            users,
            relevance: relevance_table(n_categories, view, cfg),
        }
    }

    /// Pin the current version. The returned snapshot never changes,
    /// even across concurrent rebuilds.
    pub fn snapshot(&self) -> Arc<IndexSnapshot> {
        self.current.read().expect("index lock").clone()
    }

    /// Replace the contents wholesale; the version increments by one.
    pub fn rebuild(
        &self,
        dataset: &Dataset,
        n_categories: u32,
        view: &EmbeddingView,
        cfg: &ServingConfig,
    ) -> u64 {
        let next_version = self.snapshot().version + 1;
        let snapshot = Self::snapshot_from(dataset, n_categories, view, cfg, next_version);
        *self.current.write().expect("index lock") = Arc::new(snapshot);
        next_version
    }

    /// Swap in a prebuilt snapshot (used by the isolation stress test
    /// and by index file loading).
    pub fn publish(&self, snapshot: IndexSnapshot) {
        *self.current.write().expect("index lock") = Arc::new(snapshot);
    }

    pub fn from_snapshot(snapshot: IndexSnapshot) -> Self {
        ServingIndex {
            current: Arc::new(RwLock::new(Arc::new(snapshot))),
        }
    }
}

/// Exact-match query dictionary with a recent-history fallback.
#[derive(Debug, Clone, Default)]
pub struct QueryMap {
    entries: HashMap<String, u32>,
}

impl QueryMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: &str, category: u32) {
        self.entries.insert(normalize(query), category);
    }

    pub fn from_pairs(pairs: &[(String, u32)]) -> Self {
        let mut m = QueryMap::new();
        for (q, c) in pairs {
            m.insert(q, *c);
        }
        m
    }

    /// Map a query string (or, absent that, the most frequent category
    /// among the last `window` events, ties to the most recent) to a
    /// category. `None` means the caller should fall back to global
    /// popularity.
    pub fn map_query(
        &self,
        query: Option<&str>,
        recent: &[Interaction],
        window: usize,
    ) -> Option<u32> {
        if let Some(q) = query {
            return self.entries.get(&normalize(q)).copied();
        }
        let tail = &recent[recent.len().saturating_sub(window)..];
        if tail.is_empty() {
            return None;
        }
        // count occurrences; ties resolved by the most recent occurrence
        let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new(); // cat -> (count, last index)
        for (i, e) in tail.iter().enumerate() {
            let entry = counts.entry(e.category_id).or_insert((0, 0));
            entry.0 += 1;
            entry.1 = i;
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.1 .1.cmp(&b.1 .1)))
            .map(|(cat, _)| cat)
    }
}

fn normalize(q: &str) -> String {
    q.trim().to_lowercase()
}

/// Rebuild a user's flat history (only categories in `scope`, when
/// given) from a snapshot, as search-ready interactions.
fn history_from_postings(
    snapshot: &IndexSnapshot,
    user: UserId,
    scope: Option<&[u32]>,
    overrides: &mut HashMap<(u32, u64), LabelVal>,
) -> Vec<Interaction> {
    let mut events: Vec<Interaction> = Vec::new();
    if let Some(cats) = snapshot.users.get(&user) {
        for (&cat, postings) in cats {
            if let Some(scope) = scope {
                if !scope.contains(&cat) {
                    continue;
                }
            }
            for p in postings {
                let label = match p.label {
                    LabelState::Observed(y) => y,
                    LabelState::Missing => {
                        overrides.insert((p.item_id, p.timestamp), LabelVal::Missing);
                        0
                    }
                    LabelState::Imputed(prob) => {
                        overrides.insert((p.item_id, p.timestamp), LabelVal::Imputed(prob));
                        0
                    }
                };
                events.push(Interaction::simple(user, p.item_id, cat, p.timestamp, label));
            }
        }
    }
    events.sort_by_key(|e| e.timestamp);
    events
}

/// Score `candidates` for `user` against a pinned snapshot and return
/// the top `k` by probability (ties broken by item id). Retrieval is
/// restricted to the mapped category's relevance list; an unknown user
/// runs the cold-start path with an empty personal context.
#[allow(clippy::too_many_arguments)]
pub fn recommend_topk(
    model: &Model,
    snapshot: &IndexSnapshot,
    qmap: &QueryMap,
    serving_cfg: &ServingConfig,
    user: UserId,
    query: Option<&str>,
    candidates: &[(u32, u32)], // (item_id, category_id)
    k: usize,
    search: &SearchConfig,
) -> Result<Vec<(u32, f64)>, ServingError> {
    let mut overrides = HashMap::new();
    let full_history = history_from_postings(snapshot, user, None, &mut overrides);
    let mapped = qmap.map_query(query, &full_history, serving_cfg.query_fallback_window);
    let scope: Option<Vec<u32>> = mapped.and_then(|c| snapshot.relevance.get(&c).cloned());

    let scoped_history = match &scope {
        Some(cats) => {
            overrides.clear();
            history_from_postings(snapshot, user, Some(cats), &mut overrides)
        }
        None => full_history,
    };

    let now = scoped_history
        .last()
        .map(|e| e.timestamp + 1)
        .unwrap_or(1);
    // single-user dataset view: similar users are disabled at serving
    let mut search = search.clone();
    search.n_similar_users = 0;
    let user_history = crate::data::UserHistory::new(user, scoped_history, 0);
    let mini = Dataset::from_histories(vec![user_history]);
    let mini_index = UserSearchIndex::build(&mini);
    let view = EmbeddingView {
        store: &model.store,
        item_encoder: &model.item_encoder,
        user_encoder: &model.user_encoder,
    };
    let labels = LabelChannel::WithOverrides(&overrides);

    let mut scored: Vec<(u32, f64)> = Vec::with_capacity(candidates.len());
    for &(item_id, category_id) in candidates {
        let target = Interaction::simple(user, item_id, category_id, now, 0);
        let ctx = build_context_for_target(&mini, &mini_index, 0, target, &search, &view);
        let p = model.predict_proba(&ctx, &labels, &NoisePlan::eval_default())?;
        scored.push((item_id, p));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k.min(candidates.len()));
    Ok(scored)
}

/// Replace missing labels in a postings list with model-predicted
/// probabilities; the label input channel then embeds the mixture
/// p*y(1) + (1-p)*y(0) for those events.
pub fn impute_missing_labels(
    model: &Model,
    snapshot: &IndexSnapshot,
    user: UserId,
    search: &SearchConfig,
) -> Result<BTreeMap<u32, Vec<Posting>>, ServingError> {
    let mut overrides = HashMap::new();
    let history = history_from_postings(snapshot, user, None, &mut overrides);
    let user_history = crate::data::UserHistory::new(user, history, 0);
    let mini = Dataset::from_histories(vec![user_history]);
    let mini_index = UserSearchIndex::build(&mini);
    let view = EmbeddingView {
        store: &model.store,
        item_encoder: &model.item_encoder,
        user_encoder: &model.user_encoder,
    };
    let mut search = search.clone();
    search.n_similar_users = 0;
    let labels = LabelChannel::WithOverrides(&overrides);

    let empty = BTreeMap::new();
    let cats = snapshot.users.get(&user).unwrap_or(&empty);
    let mut out: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
    for (&cat, postings) in cats {
        let mut fixed = Vec::with_capacity(postings.len());
        for p in postings {
            let label = match p.label {
                LabelState::Missing => {
                    let target = Interaction::simple(user, p.item_id, cat, p.timestamp, 0);
                    let ctx =
                        build_context_for_target(&mini, &mini_index, 0, target, &search, &view);
                    let prob = model.predict_proba(&ctx, &labels, &NoisePlan::eval_default())?;
                    LabelState::Imputed(prob)
                }
                other => other,
            };
            fixed.push(Posting {
                item_id: p.item_id,
                timestamp: p.timestamp,
                label,
            });
        }
        out.insert(cat, fixed);
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// line protocol: `user \t query-or-dash \t K \t item,item,...` in,
// K lines of `item \t score` out (6 fraction digits, exact)
// ---------------------------------------------------------------------

#[derive(Debug, PartialEq, Eq)]
pub struct ServeRequest {
    pub user: UserId,
    pub query: Option<String>,
    pub k: usize,
    pub candidates: Vec<u32>,
}

pub fn parse_request(line: &str) -> Result<ServeRequest, ServingError> {
    let parts: Vec<&str> = line.trim_end_matches('\n').split('\t').collect();
    if parts.len() != 4 {
        return Err(ServingError::BadRequest(format!(
            "expected 4 tab-separated fields, got {}",
            parts.len()
        )));
    }
    let user: UserId = parts[0]
        .parse()
        .map_err(|_| ServingError::BadRequest(format!("bad user id {:?}", parts[0])))?;
    let query = if parts[1] == "-" {
        None
    } else {
        Some(parts[1].to_string())
    };
    let k: usize = parts[2]
        .parse()
        .map_err(|_| ServingError::BadRequest(format!("bad K {:?}", parts[2])))?;
    let mut candidates = Vec::new();
    for c in parts[3].split(',').filter(|s| !s.is_empty()) {
        candidates.push(
            c.parse()
                .map_err(|_| ServingError::BadRequest(format!("bad candidate {:?}", c)))?,
        );
    }
    if candidates.is_empty() {
        return Err(ServingError::BadRequest("no candidates".into()));
    }
    Ok(ServeRequest {
        user,
        query,
        k,
        candidates,
    })
}

pub fn format_response(ranked: &[(u32, f64)]) -> String {
    let mut out = String::new();
    for (item, score) in ranked {
        out.push_str(&format!("{}\t{:.6}\n", item, score));
    }
    out
}

/// Serve line-oriented requests until EOF. Candidate categories are
/// looked up from `item_categories`; unknown items fall back to the
/// OOV category.
pub fn serve_loop<R: Read, W: Write>(
    reader: R,
    mut writer: W,
    model: &Model,
    index: &ServingIndex,
    qmap: &QueryMap,
    serving_cfg: &ServingConfig,
    search: &SearchConfig,
    item_categories: &HashMap<u32, u32>,
    oov_category: u32,
) -> Result<(), ServingError> {
    let reader = std::io::BufReader::new(reader);
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match parse_request(&line) {
            Ok(req) => {
                let snapshot = index.snapshot();
                let candidates: Vec<(u32, u32)> = req
                    .candidates
                    .iter()
                    .map(|&i| (i, item_categories.get(&i).copied().unwrap_or(oov_category)))
                    .collect();
                let ranked = recommend_topk(
                    model,
                    &snapshot,
                    qmap,
                    serving_cfg,
                    req.user,
                    req.query.as_deref(),
                    &candidates,
                    req.k,
                    search,
                )?;
                writer.write_all(format_response(&ranked).as_bytes())?;
            }
            Err(e) => {
                writeln!(writer, "ERR\t{}", e)?;
            }
        }
        writer.flush()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// versioned index persistence
// ---------------------------------------------------------------------

const INDEX_MAGIC: &[u8; 4] = b"STIX";
const INDEX_VERSION: u32 = 1;

pub fn save_index<W: Write>(mut w: W, snapshot: &IndexSnapshot) -> Result<(), ServingError> {
    w.write_all(INDEX_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    w.write_all(&snapshot.version.to_le_bytes())?;
    w.write_all(&(snapshot.users.len() as u64).to_le_bytes())?;
    for (user, cats) in &snapshot.users {
        w.write_all(&user.to_le_bytes())?;
        w.write_all(&(cats.len() as u64).to_le_bytes())?;
        for (cat, postings) in cats {
            w.write_all(&cat.to_le_bytes())?;
            w.write_all(&(postings.len() as u64).to_le_bytes())?;
            for p in postings {
                w.write_all(&p.item_id.to_le_bytes())?;
                w.write_all(&p.timestamp.to_le_bytes())?;
                match p.label {
                    LabelState::Observed(y) => {
                        w.write_all(&[0u8, y])?;
                        w.write_all(&0u64.to_le_bytes())?;
                    }
                    LabelState::Missing => {
                        w.write_all(&[1u8, 0])?;
                        w.write_all(&0u64.to_le_bytes())?;
                    }
                    LabelState::Imputed(prob) => {
                        w.write_all(&[2u8, 0])?;
                        w.write_all(&prob.to_bits().to_le_bytes())?;
                    }
                }
            }
        }
    }
    w.write_all(&(snapshot.relevance.len() as u64).to_le_bytes())?;
    for (cat, related) in &snapshot.relevance {
        w.write_all(&cat.to_le_bytes())?;
        w.write_all(&(related.len() as u64).to_le_bytes())?;
        for r in related {
            w.write_all(&r.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_index<R: Read>(mut r: R) -> Result<IndexSnapshot, ServingError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(ServingError::Format("bad magic".into()));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u32b)?;
    if u32::from_le_bytes(u32b) != INDEX_VERSION {
        return Err(ServingError::Format("unsupported index format version".into()));
    }
    r.read_exact(&mut u64b)?;
    let version = u64::from_le_bytes(u64b);
    r.read_exact(&mut u64b)?;
    let n_users = u64::from_le_bytes(u64b) as usize;
    let mut users = BTreeMap::new();
    for _ in 0..n_users {
        r.read_exact(&mut u32b)?;
        let user = u32::from_le_bytes(u32b);
        r.read_exact(&mut u64b)?;
        let n_cats = u64::from_le_bytes(u64b) as usize;
        let mut cats = BTreeMap::new();
        for _ in 0..n_cats {
            r.read_exact(&mut u32b)?;
            let cat = u32::from_le_bytes(u32b);
            r.read_exact(&mut u64b)?;
            let n_postings = u64::from_le_bytes(u64b) as usize;
            let mut postings = Vec::with_capacity(n_postings);
            for _ in 0..n_postings {
                r.read_exact(&mut u32b)?;
                let item_id = u32::from_le_bytes(u32b);
                r.read_exact(&mut u64b)?;
                let timestamp = u64::from_le_bytes(u64b);
                let mut tag = [0u8; 2];
                r.read_exact(&mut tag)?;
                r.read_exact(&mut u64b)?;
                let label = match tag[0] {
                    0 => LabelState::Observed(tag[1]),
                    1 => LabelState::Missing,
                    2 => LabelState::Imputed(f64::from_bits(u64::from_le_bytes(u64b))),
                    other => {
                        return Err(ServingError::Format(format!("bad label tag {}", other)))
                    }
                };
                postings.push(Posting {
                    item_id,
                    timestamp,
                    label,
                });
            }
            cats.insert(cat, postings);
        }
        users.insert(user, cats);
    }
    r.read_exact(&mut u64b)?;
    let n_rel = u64::from_le_bytes(u64b) as usize;
    let mut relevance = BTreeMap::new();
    for _ in 0..n_rel {
        r.read_exact(&mut u32b)?;
        let cat = u32::from_le_bytes(u32b);
        r.read_exact(&mut u64b)?;
        let n = u64::from_le_bytes(u64b) as usize;
        let mut related = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32b)?;
            related.push(u32::from_le_bytes(u32b));
        }
        relevance.insert(cat, related);
    }
    Ok(IndexSnapshot {
        version,
        users,
        relevance,
    })
}
