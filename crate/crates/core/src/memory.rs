//! Episodic memory: best observed reward per (state, action), read back by
//! similarity-weighted nearest-neighbour lookup.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{enumerate_actions, factorial, Action};
use crate::encoder::{cosine_similarity, Embedding};
use crate::error::{PoemError, Result};

pub const SNAPSHOT_VERSION: u64 = 1;

/// Floor applied to neighbour similarities before normalizing weights.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// A memory key: an embedded query plus the text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRecord {
    state_id: String,
    embedding: Embedding,
    source_text: String,
}

impl StateRecord {
    pub fn new(source_text: impl Into<String>, embedding: Embedding) -> Self {
        let source_text = source_text.into();
        StateRecord {
            state_id: state_id_for(&source_text),
            embedding,
            source_text,
        }
    }

    pub fn state_id(&self) -> &str {
        &self.state_id
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }
}

/// Stable id of a state: the first 16 bytes of SHA-256 over the text, in hex.
pub fn state_id_for(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
struct Entry {
    record: StateRecord,
    // keyed by lexicographic action index
    rewards: BTreeMap<usize, f64>,
    touch: AtomicU64,
}

impl Entry {
    fn last_touch(&self) -> u64 {
        self.touch.load(AtomicOrdering::Relaxed)
    }
}

impl Clone for Entry {
    fn clone(&self) -> Self {
        Entry {
            record: self.record.clone(),
            rewards: self.rewards.clone(),
            touch: AtomicU64::new(self.last_touch()),
        }
    }
}

/// Read-only view of one stored state.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    entry: &'a Entry,
    m: usize,
}

impl<'a> StateView<'a> {
    pub fn record(&self) -> &'a StateRecord {
        &self.entry.record
    }

    pub fn last_touch(&self) -> u64 {
        self.entry.last_touch()
    }

    pub fn rewards(&self) -> impl Iterator<Item = (Action, f64)> + 'a {
        let m = self.m;
        self.entry.rewards.iter().map(move |(&i, &r)| {
            (
                Action::from_lex_index(m, i).expect("stored index in range"),
                r,
            )
        })
    }

    pub fn filled(&self) -> usize {
        self.entry.rewards.len()
    }
}

/// Result of an argmax over memory estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BestAction {
    pub action: Action,
    /// `None` when no action had a defined estimate.
    pub estimate: Option<f64>,
    /// True when the identity ordering was returned because nothing was defined.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOutcome {
    pub inserted_state: bool,
    pub evicted: bool,
}

/// Reads take `&self` and update recency through atomics; writes need
/// `&mut self`, so a snapshot always sees a consistent view.
#[derive(Debug)]
pub struct EpisodicMemory {
    entries: BTreeMap<String, Entry>,
    capacity: usize,
    m: usize,
    dim: Option<usize>,
    touch_counter: AtomicU64,
}

impl Clone for EpisodicMemory {
    fn clone(&self) -> Self {
        EpisodicMemory {
            entries: self.entries.clone(),
            capacity: self.capacity,
            m: self.m,
            dim: self.dim,
            touch_counter: AtomicU64::new(self.touch_counter.load(AtomicOrdering::Relaxed)),
        }
    }
}

impl EpisodicMemory {
    pub fn new(capacity: usize, m: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(PoemError::invalid("memory capacity must be positive"));
        }
        // validates m against the enumeration ceiling
        enumerate_actions(m)?;
        Ok(EpisodicMemory {
            entries: BTreeMap::new(),
            capacity,
            m,
            dim: None,
            touch_counter: AtomicU64::new(0),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of stored (state, action) pairs.
    pub fn filled_pairs(&self) -> usize {
        self.entries.values().map(|e| e.rewards.len()).sum()
    }

    pub fn contains_state(&self, state_id: &str) -> bool {
        self.entries.contains_key(state_id)
    }

    pub fn stored(&self, state_id: &str, action: &Action) -> Option<f64> {
        if action.m() != self.m {
            return None;
        }
        self.entries
            .get(state_id)
            .and_then(|e| e.rewards.get(&action.lex_index()).copied())
    }

    pub fn state(&self, state_id: &str) -> Option<StateView<'_>> {
        self.entries
            .get(state_id)
            .map(|entry| StateView { entry, m: self.m })
    }

    /// States ordered from least to most recently used.
    pub fn states_by_recency(&self) -> Vec<StateView<'_>> {
        let mut views: Vec<StateView<'_>> = self
            .entries
            .values()
            .map(|entry| StateView { entry, m: self.m })
            .collect();
        views.sort_by(|a, b| {
            a.last_touch()
                .cmp(&b.last_touch())
                .then_with(|| a.record().state_id.cmp(&b.record().state_id))
        });
        views
    }

    fn next_touch(&self) -> u64 {
        self.touch_counter.fetch_add(1, AtomicOrdering::Relaxed) + 1
    }

    fn touch(&self, entry: &Entry) {
        entry
            .touch
            .store(self.next_touch(), AtomicOrdering::Relaxed);
    }

    fn check_state(&self, s: &StateRecord) -> Result<()> {
        match self.dim {
            Some(d) if d != s.embedding.dim() => Err(PoemError::invalid(format!(
                "state embedding dim {} does not match memory dim {d}",
                s.embedding.dim()
            ))),
            _ => Ok(()),
        }
    }

    fn check_action(&self, a: &Action) -> Result<()> {
        if a.m() != self.m {
            return Err(PoemError::invalid(format!(
                "action {a} has {} slots, memory expects {}",
                a.m(),
                self.m
            )));
        }
        Ok(())
    }

    /// Max-update write. Inserting a new state into a full memory evicts the
    /// least recently used state first.
    pub fn write(&mut self, s: &StateRecord, a: &Action, r: f64) -> Result<WriteOutcome> {
        if !r.is_finite() {
            return Err(PoemError::invalid(format!("reward {r} is not finite")));
        }
        self.check_action(a)?;
        self.check_state(s)?;
        let mut outcome = WriteOutcome {
            inserted_state: false,
            evicted: false,
        };
        if !self.entries.contains_key(&s.state_id) {
            if self.entries.len() >= self.capacity {
                let victim = self
                    .entries
                    .iter()
                    .min_by(|(ka, a), (kb, b)| {
                        a.last_touch().cmp(&b.last_touch()).then_with(|| ka.cmp(kb))
                    })
                    .map(|(k, _)| k.clone())
                    .expect("full memory is non-empty");
                self.entries.remove(&victim);
                outcome.evicted = true;
            }
            self.entries.insert(
                s.state_id.clone(),
                Entry {
                    record: s.clone(),
                    rewards: BTreeMap::new(),
                    touch: AtomicU64::new(0),
                },
            );
            self.dim.get_or_insert(s.embedding.dim());
            outcome.inserted_state = true;
        }
        let touch = self.next_touch();
        let entry = self.entries.get_mut(&s.state_id).expect("entry present");
        entry.touch.store(touch, AtomicOrdering::Relaxed);
        entry
            .rewards
            .entry(a.lex_index())
            .and_modify(|old| *old = old.max(r))
            .or_insert(r);
        Ok(outcome)
    }

    /// The `k` stored states most similar to `s_t`, closest first
    /// (ties by state id).
    fn neighbors(&self, s_t: &StateRecord, k: usize) -> Result<Vec<(f64, &Entry)>> {
        let mut scored = self
            .entries
            .values()
            .map(|e| Ok((cosine_similarity(&s_t.embedding, &e.record.embedding)?, e)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|(sa, ea), (sb, eb)| {
            sb.total_cmp(sa)
                .then_with(|| ea.record.state_id.cmp(&eb.record.state_id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    fn weighted(neighbors: &[(f64, &Entry)], action_index: usize) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (sim, entry) in neighbors {
            if let Some(r) = entry.rewards.get(&action_index) {
                let w = sim.max(WEIGHT_FLOOR);
                num += w * r;
                den += w;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Estimated value of `a` at `s_t`; `None` when undefined.
    pub fn read(&self, s_t: &StateRecord, a: &Action, k: usize) -> Result<Option<f64>> {
        if k == 0 {
            return Err(PoemError::invalid("k must be at least 1"));
        }
        self.check_action(a)?;
        self.check_state(s_t)?;
        let idx = a.lex_index();
        if let Some(entry) = self.entries.get(&s_t.state_id) {
            if let Some(&r) = entry.rewards.get(&idx) {
                self.touch(entry);
                return Ok(Some(r));
            }
        }
        let neighbors = self.neighbors(s_t, k)?;
        for (_, e) in &neighbors {
            self.touch(e);
        }
        Ok(Self::weighted(&neighbors, idx))
    }

    /// Estimates for every action, indexed by lexicographic action index.
    pub fn estimates(&self, s_t: &StateRecord, k: usize) -> Result<Vec<Option<f64>>> {
        if k == 0 {
            return Err(PoemError::invalid("k must be at least 1"));
        }
        self.check_state(s_t)?;
        let exact = self.entries.get(&s_t.state_id);
        let neighbors = self.neighbors(s_t, k)?;
        if let Some(e) = exact {
            self.touch(e);
        }
        for (_, e) in &neighbors {
            self.touch(e);
        }
        Ok((0..factorial(self.m))
            .map(|idx| {
                exact
                    .and_then(|e| e.rewards.get(&idx).copied())
                    .or_else(|| Self::weighted(&neighbors, idx))
            })
            .collect())
    }

    /// Argmax of the estimates; ties go to the lexicographically smallest
    /// action and undefined estimates are skipped.
    pub fn best_action(&self, s_t: &StateRecord, k: usize) -> Result<BestAction> {
        if self.is_empty() {
            log::warn!("best_action on empty memory; using descending-similarity order");
            return Ok(BestAction {
                action: Action::identity(self.m),
                estimate: None,
                fallback: true,
            });
        }
        let mut best: Option<(usize, f64)> = None;
        for (idx, est) in self.estimates(s_t, k)?.into_iter().enumerate() {
            if let Some(v) = est {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((idx, v));
                }
            }
        }
        Ok(match best {
            Some((idx, v)) => BestAction {
                action: Action::from_lex_index(self.m, idx)?,
                estimate: Some(v),
                fallback: false,
            },
            None => BestAction {
                action: Action::identity(self.m),
                estimate: None,
                fallback: true,
            },
        })
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let states = self
            .states_by_recency()
            .into_iter()
            .map(|v| SnapshotState {
                state_id: v.record().state_id.clone(),
                text: v.record().source_text.clone(),
                embedding: v.record().embedding.values().to_vec(),
                actions: v.rewards().map(|(a, r)| (a.key(), r)).collect(),
                touch: v.last_touch(),
            })
            .collect();
        Snapshot {
            version: SNAPSHOT_VERSION,
            dim: self.dim,
            m: self.m,
            capacity: self.capacity,
            states,
        }
    }

    pub fn from_snapshot(snap: Snapshot) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(PoemError::Version {
                found: snap.version,
                expected: SNAPSHOT_VERSION,
            });
        }
        let load_err = |context: String, detail: String| PoemError::Load { context, detail };
        let mut mem = EpisodicMemory::new(snap.capacity, snap.m)
            .map_err(|e| load_err("header".into(), e.to_string()))?;
        if snap.states.len() > snap.capacity {
            return Err(load_err(
                "states".into(),
                format!(
                    "{} states exceed capacity {}",
                    snap.states.len(),
                    snap.capacity
                ),
            ));
        }
        mem.dim = snap.dim;
        let mut max_touch = 0;
        for (i, st) in snap.states.into_iter().enumerate() {
            let at = |field: &str| format!("states[{i}].{field}");
            let embedding = Embedding::new(st.embedding)
                .map_err(|e| load_err(at("embedding"), e.to_string()))?;
            match mem.dim {
                Some(d) if d != embedding.dim() => {
                    return Err(load_err(
                        at("embedding"),
                        format!("dim {} does not match header dim {d}", embedding.dim()),
                    ))
                }
                Some(_) => {}
                None => {
                    return Err(load_err(
                        "dim".into(),
                        "missing dim for a non-empty memory".into(),
                    ))
                }
            }
            let mut rewards = BTreeMap::new();
            for (key, r) in st.actions {
                let a: Action = key.parse().map_err(|e: PoemError| {
                    load_err(at(&format!("actions[{key:?}]")), e.to_string())
                })?;
                if a.m() != mem.m {
                    return Err(load_err(
                        at(&format!("actions[{key:?}]")),
                        format!("action has {} slots, memory m is {}", a.m(), mem.m),
                    ));
                }
                if !r.is_finite() {
                    return Err(load_err(
                        at(&format!("actions[{key:?}]")),
                        "reward is not finite".into(),
                    ));
                }
                rewards.insert(a.lex_index(), r);
            }
            max_touch = max_touch.max(st.touch);
            let record = StateRecord {
                state_id: st.state_id.clone(),
                embedding,
                source_text: st.text,
            };
            let previous = mem.entries.insert(
                st.state_id.clone(),
                Entry {
                    record,
                    rewards,
                    touch: AtomicU64::new(st.touch),
                },
            );
            if previous.is_some() {
                return Err(load_err(
                    at("state_id"),
                    format!("duplicate id {}", st.state_id),
                ));
            }
        }
        mem.touch_counter = AtomicU64::new(max_touch);
        Ok(mem)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // check the version before the full schema so unknown versions get a clear error
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| PoemError::Load {
            context: format!("line {}, column {}", e.line(), e.column()),
            detail: e.to_string(),
        })?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(SNAPSHOT_VERSION) => {}
            Some(found) => {
                return Err(PoemError::Version {
                    found,
                    expected: SNAPSHOT_VERSION,
                })
            }
            None => {
                return Err(PoemError::Load {
                    context: "version".into(),
                    detail: "missing or non-integer version field".into(),
                })
            }
        }
        let snap: Snapshot = serde_json::from_value(value).map_err(|e| PoemError::Load {
            context: "snapshot".into(),
            detail: e.to_string(),
        })?;
        Self::from_snapshot(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PoemError::Load {
            context: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

/// On-disk memory format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub version: u64,
    pub dim: Option<usize>,
    pub m: usize,
    pub capacity: usize,
    pub states: Vec<SnapshotState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotState {
    pub state_id: String,
    pub text: String,
    pub embedding: Vec<f64>,
    pub actions: BTreeMap<String, f64>,
    pub touch: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(text: &str, v: &[f64]) -> StateRecord {
        StateRecord::new(text, Embedding::new(v.to_vec()).unwrap())
    }

    fn a(key: &str) -> Action {
        key.parse().unwrap()
    }

    #[test]
    fn max_update_writes() {
        let mut mem = EpisodicMemory::new(4, 2).unwrap();
        let s = state("s", &[1.0, 0.0]);
        mem.write(&s, &a("1-2"), 0.5).unwrap();
        assert_eq!(mem.stored(s.state_id(), &a("1-2")), Some(0.5));
        mem.write(&s, &a("1-2"), 0.3).unwrap();
        assert_eq!(mem.stored(s.state_id(), &a("1-2")), Some(0.5));
        mem.write(&s, &a("1-2"), 0.9).unwrap();
        assert_eq!(mem.stored(s.state_id(), &a("1-2")), Some(0.9));
    }

    #[test]
    fn rejects_bad_writes() {
        let mut mem = EpisodicMemory::new(4, 2).unwrap();
        let s = state("s", &[1.0, 0.0]);
        assert!(mem.write(&s, &a("1-2"), f64::NAN).is_err());
        assert!(mem.write(&s, &a("1-2-3"), 0.1).is_err());
        mem.write(&s, &a("1-2"), 0.1).unwrap();
        assert!(mem
            .write(&state("t", &[1.0, 0.0, 0.0]), &a("1-2"), 0.1)
            .is_err());
    }

    #[test]
    fn lru_eviction() {
        let mut mem = EpisodicMemory::new(2, 2).unwrap();
        let (sa, sb, sc) = (
            state("A", &[1.0, 0.0]),
            state("B", &[0.0, 1.0]),
            state("C", &[1.0, 1.0]),
        );
        mem.write(&sa, &a("1-2"), 0.1).unwrap();
        mem.write(&sb, &a("1-2"), 0.2).unwrap();
        let out = mem.write(&sc, &a("2-1"), 0.3).unwrap();
        assert!(out.evicted && out.inserted_state);
        assert!(!mem.contains_state(sa.state_id()));
        assert!(mem.contains_state(sb.state_id()));
        assert!(mem.contains_state(sc.state_id()));
    }

    #[test]
    fn reads_refresh_recency() {
        let mut mem = EpisodicMemory::new(2, 2).unwrap();
        let (sa, sb, sc) = (
            state("A", &[1.0, 0.0]),
            state("B", &[0.0, 1.0]),
            state("C", &[1.0, 1.0]),
        );
        mem.write(&sa, &a("1-2"), 0.1).unwrap();
        mem.write(&sb, &a("1-2"), 0.2).unwrap();
        mem.read(&sa, &a("1-2"), 1).unwrap();
        mem.write(&sc, &a("1-2"), 0.3).unwrap();
        assert!(mem.contains_state(sa.state_id()));
        assert!(!mem.contains_state(sb.state_id()));
    }

    #[test]
    fn weighted_read_hand_example() {
        // neighbour similarities 0.8 and 0.2 to the query, rewards 1.0 and 0.0
        let q = state("q", &[1.0, 0.0]);
        let n1 = state("n1", &[0.8, 0.6]);
        let n2 = state("n2", &[0.2, (1.0f64 - 0.04).sqrt()]);
        let mut mem = EpisodicMemory::new(8, 2).unwrap();
        mem.write(&n1, &a("2-1"), 1.0).unwrap();
        mem.write(&n2, &a("2-1"), 0.0).unwrap();
        let est = mem.read(&q, &a("2-1"), 2).unwrap().unwrap();
        assert!((est - 0.8).abs() < 1e-9, "{est}");
        assert_eq!(mem.read(&q, &a("1-2"), 2).unwrap(), None);
    }

    #[test]
    fn exact_hit_ignores_neighbours() {
        let s = state("s", &[1.0, 0.0]);
        let mut mem = EpisodicMemory::new(8, 2).unwrap();
        mem.write(&s, &a("1-2"), 0.7).unwrap();
        mem.write(&state("t", &[1.0, 0.01]), &a("1-2"), 5.0)
            .unwrap();
        assert_eq!(mem.read(&s, &a("1-2"), 5).unwrap(), Some(0.7));
    }

    #[test]
    fn single_state_normalizes() {
        let mut mem = EpisodicMemory::new(8, 2).unwrap();
        mem.write(&state("s", &[1.0, 0.0]), &a("2-1"), 0.4).unwrap();
        for k in [1, 3, 10] {
            let est = mem.read(&state("q", &[-0.3, 1.0]), &a("2-1"), k).unwrap();
            assert!((est.unwrap() - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_memory_is_undefined_and_falls_back() {
        let mem = EpisodicMemory::new(8, 3).unwrap();
        let q = state("q", &[1.0, 0.0]);
        assert_eq!(mem.read(&q, &a("1-2-3"), 3).unwrap(), None);
        let best = mem.best_action(&q, 3).unwrap();
        assert!(best.fallback);
        assert_eq!(best.action, Action::identity(3));
    }

    #[test]
    fn best_action_weighted_disagreement() {
        // weights 0.9 / 0.1 after normalization (similarities 0.45 and 0.05)
        let q = state("q", &[1.0, 0.0]);
        let n1 = state("n1", &[0.45, (1.0f64 - 0.45 * 0.45).sqrt()]);
        let n2 = state("n2", &[0.05, (1.0f64 - 0.0025).sqrt()]);
        let mut mem = EpisodicMemory::new(8, 2).unwrap();
        mem.write(&n1, &a("1-2"), 1.0).unwrap();
        mem.write(&n1, &a("2-1"), 0.0).unwrap();
        mem.write(&n2, &a("1-2"), 0.0).unwrap();
        mem.write(&n2, &a("2-1"), 1.0).unwrap();
        // estimates: 1-2 -> 0.9, 2-1 -> 0.1
        let best = mem.best_action(&q, 2).unwrap();
        assert_eq!(best.action, a("1-2"));
        assert!((best.estimate.unwrap() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn only_defined_action_wins() {
        let q = state("q", &[1.0, 0.0]);
        let mut mem = EpisodicMemory::new(8, 3).unwrap();
        mem.write(&state("n1", &[1.0, 0.2]), &a("3-1-2"), -4.0)
            .unwrap();
        mem.write(&state("n2", &[1.0, -0.2]), &a("3-1-2"), -2.0)
            .unwrap();
        let best = mem.best_action(&q, 2).unwrap();
        assert_eq!(best.action, a("3-1-2"));
        assert!(!best.fallback);
    }

    #[test]
    fn ties_pick_smallest_action() {
        let s = state("s", &[1.0, 0.0]);
        let mut mem = EpisodicMemory::new(8, 3).unwrap();
        mem.write(&s, &a("3-2-1"), 1.0).unwrap();
        mem.write(&s, &a("2-1-3"), 1.0).unwrap();
        assert_eq!(mem.best_action(&s, 1).unwrap().action, a("2-1-3"));
    }

    #[test]
    fn negative_similarity_clamped() {
        let q = state("q", &[1.0, 0.0]);
        let mut mem = EpisodicMemory::new(8, 2).unwrap();
        mem.write(&state("opp", &[-1.0, 0.0]), &a("1-2"), 3.0)
            .unwrap();
        let est = mem.read(&q, &a("1-2"), 1).unwrap().unwrap();
        assert!((est - 3.0).abs() < 1e-12);
    }

    #[test]
    fn snapshot_roundtrip_and_version_guard() {
        let mut mem = EpisodicMemory::new(3, 2).unwrap();
        for (i, t) in ["a", "b", "c", "d"].iter().enumerate() {
            let s = state(t, &[1.0, i as f64 * 0.1 + 0.013]);
            mem.write(&s, &a("1-2"), 0.1 * i as f64 + 1.0 / 3.0)
                .unwrap();
        }
        let json = mem.to_json();
        let back = EpisodicMemory::from_json(&json).unwrap();
        assert_eq!(back.to_snapshot(), mem.to_snapshot());
        assert_eq!(back.len(), 3);
        assert!(!back.contains_state(&state_id_for("a")));

        let bumped = json.replacen("\"version\": 1", "\"version\": 7", 1);
        match EpisodicMemory::from_json(&bumped).unwrap_err() {
            PoemError::Version { found: 7, .. } => {}
            other => panic!("unexpected {other}"),
        }
        let broken = json.replacen("\"1-2\"", "\"1-1\"", 1);
        let err = EpisodicMemory::from_json(&broken).unwrap_err().to_string();
        assert!(err.contains("states[0].actions"), "{err}");
    }
}
