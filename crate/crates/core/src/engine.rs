//! Training (epsilon-greedy collection into memory) and testing
//! (memory-guided ordering) loops.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{enumerate_actions, reorder, Action};
use crate::dataset::Record;
use crate::encoder::EncoderBackend;
use crate::error::{PoemError, Result};
use crate::memory::{BestAction, EpisodicMemory, StateRecord};
use crate::prompt::{build_prompt, PromptSpec};
use crate::reward::{Outcome, RewardOracle, Scoring};
use crate::selection::{select_examples, Example, InContextSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationMode {
    EpsilonGreedy,
    /// Writes every (state, action) pair exactly once. Test harness
    /// extension, not a learning procedure.
    Exhaustive,
}

fn d_iterations() -> usize {
    60
}
fn d_minibatch() -> usize {
    16
}
fn d_eps_init() -> f64 {
    1.0
}
fn d_eps_final() -> f64 {
    0.0001
}
fn d_m() -> usize {
    4
}
fn d_k() -> usize {
    10
}
fn d_in_flight() -> usize {
    4
}
fn d_mode() -> ExplorationMode {
    ExplorationMode::EpsilonGreedy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_minibatch")]
    pub minibatch_size: usize,
    #[serde(default = "d_eps_init")]
    pub epsilon_initial: f64,
    #[serde(default = "d_eps_final")]
    pub epsilon_final: f64,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_mode")]
    pub exploration_mode: ExplorationMode,
    /// Memory capacity; defaults to the number of training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    /// Bound on concurrent reward queries within a minibatch.
    #[serde(default = "d_in_flight")]
    pub max_in_flight: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: d_iterations(),
            minibatch_size: d_minibatch(),
            epsilon_initial: d_eps_init(),
            epsilon_final: d_eps_final(),
            m: d_m(),
            k: d_k(),
            seed: 0,
            exploration_mode: d_mode(),
            capacity: None,
            max_in_flight: d_in_flight(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (ei, ef) = (self.epsilon_initial, self.epsilon_final);
        if !(0.0 <= ef && ef <= ei && ei <= 1.0) {
            return Err(PoemError::invalid(format!(
                "need 0 <= epsilon_final <= epsilon_initial <= 1, got {ef} and {ei}"
            )));
        }
        if self.iterations == 0 {
            return Err(PoemError::invalid("iterations must be >= 1"));
        }
        if self.minibatch_size == 0 {
            return Err(PoemError::invalid("minibatch_size must be >= 1"));
        }
        if self.k == 0 {
            return Err(PoemError::invalid("k must be >= 1"));
        }
        if self.max_in_flight == 0 {
            return Err(PoemError::invalid("max_in_flight must be >= 1"));
        }
        if self.capacity == Some(0) {
            return Err(PoemError::invalid("capacity must be >= 1"));
        }
        enumerate_actions(self.m).map(|_| ())
    }
}

/// Linearly decayed exploration rate at iteration `t` of `N`.
pub fn epsilon_at(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t > cfg.iterations {
        return Err(PoemError::invalid(format!(
            "iteration {t} outside 0..={}",
            cfg.iterations
        )));
    }
    let frac = t as f64 / cfg.iterations as f64;
    // same line as eps_i - (eps_i - eps_f) * t / N, written so both endpoints are exact
    Ok(cfg.epsilon_initial * (1.0 - frac) + cfg.epsilon_final * frac)
}

/// The shared components of both loops.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub encoder: &'a dyn EncoderBackend,
    pub ic: &'a InContextSet,
    pub prompt: &'a PromptSpec,
    pub oracle: &'a dyn RewardOracle,
}

/// A query after encoding and example retrieval.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub record: Record,
    pub state: StateRecord,
    /// Retrieved examples in canonical rank order (rank 1 first).
    pub selected: Vec<Example>,
}

impl Pipeline<'_> {
    /// Encodes each query's retrieval text and retrieves its examples.
    pub fn prepare(&self, queries: &[Record], m: usize) -> Result<Vec<PreparedQuery>> {
        let field = self.ic.retrieval_field();
        let texts = queries
            .iter()
            .map(|q| field.text(q))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let embeddings = self.encoder.encode(&refs)?;
        if embeddings.len() != queries.len() {
            return Err(PoemError::Protocol {
                backend: self.encoder.id().to_string(),
                detail: format!(
                    "expected {} embeddings, got {}",
                    queries.len(),
                    embeddings.len()
                ),
            });
        }
        queries
            .iter()
            .zip(texts)
            .zip(embeddings)
            .map(|((record, text), emb)| {
                let selected = select_examples(&emb, self.ic, m)
                    .map_err(|e| e.context(format!("query {}", record.index)))?;
                Ok(PreparedQuery {
                    record: record.clone(),
                    state: StateRecord::new(text, emb),
                    selected,
                })
            })
            .collect()
    }
}

struct Job<'q> {
    query: &'q PreparedQuery,
    action: Option<Action>,
    ordered: Vec<Example>,
    prompt: String,
    nonce: u64,
}

impl<'q> Job<'q> {
    fn new(
        pipeline: &Pipeline<'_>,
        query: &'q PreparedQuery,
        action: Option<Action>,
        nonce: u64,
    ) -> Result<Self> {
        let ordered = match &action {
            Some(a) => reorder(&query.selected, a)?,
            None => Vec::new(),
        };
        let prompt = build_prompt(pipeline.prompt, &ordered, &query.record.fields)?;
        Ok(Job {
            query,
            action,
            ordered,
            prompt,
            nonce,
        })
    }

    fn scoring(&self) -> Scoring<'_> {
        Scoring {
            query: &self.query.record,
            state: self.query.state.embedding(),
            ordered: &self.ordered,
            prompt: &self.prompt,
            nonce: self.nonce,
        }
    }
}

/// Scores jobs with at most `in_flight` concurrent oracle calls; results
/// come back in job order.
fn score_all(
    oracle: &dyn RewardOracle,
    jobs: &[Job<'_>],
    in_flight: usize,
) -> Vec<Result<Outcome>> {
    let workers = in_flight.min(jobs.len());
    if workers <= 1 {
        return jobs.iter().map(|j| oracle.evaluate(&j.scoring())).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Outcome>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let out = oracle.evaluate(&job.scoring());
                *slots[i].lock().expect("slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .expect("slot poisoned")
                .expect("every job scored")
        })
        .collect()
}

/// SplitMix64-style mixing of a few integers into a noise nonce.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub epsilon: f64,
    pub mean_reward: f64,
    pub writes: usize,
    pub fill_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub exploration: String,
    /// Distinct states the memory can hold: min(unique training states, capacity).
    pub states: usize,
    pub actions_per_state: usize,
    pub filled_pairs: usize,
    pub fill_ratio: f64,
    pub iterations: Vec<IterationStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

impl RunReport {
    /// The report with timing removed, for byte-stable output.
    pub fn without_timing(mut self) -> Self {
        self.wall_clock_ms = None;
        self
    }
}

/// Runs the training loop, calling `on_iteration` after each iteration's
/// writes (e.g. to snapshot the memory).
pub fn train_with_hook(
    cfg: &TrainConfig,
    train_set: &[Record],
    pipeline: &Pipeline<'_>,
    memory: &mut EpisodicMemory,
    on_iteration: &mut dyn FnMut(usize, &EpisodicMemory) -> Result<()>,
) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(PoemError::invalid("training set is empty"));
    }
    if memory.m() != cfg.m {
        return Err(PoemError::invalid(format!(
            "memory holds m={} actions but config uses m={}",
            memory.m(),
            cfg.m
        )));
    }
    let queries = pipeline.prepare(train_set, cfg.m)?;
    let actions = enumerate_actions(cfg.m)?;
    let unique: HashSet<&str> = queries.iter().map(|q| q.state.state_id()).collect();
    let states = unique.len().min(memory.capacity());
    let total_pairs = states * actions.len();
    let fill = |mem: &EpisodicMemory| mem.filled_pairs() as f64 / total_pairs as f64;

    let mut iterations = Vec::new();
    let exploration = match cfg.exploration_mode {
        ExplorationMode::EpsilonGreedy => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let batch = cfg.minibatch_size.min(queries.len());
            for t in 0..cfg.iterations {
                let epsilon = epsilon_at(t, cfg)?;
                let picks = rand::seq::index::sample(&mut rng, queries.len(), batch).into_vec();
                let mut jobs = Vec::with_capacity(batch);
                for (pos, &qi) in picks.iter().enumerate() {
                    let q = &queries[qi];
                    let coin: f64 = rng.random();
                    let random_action = rng.random_range(0..actions.len());
                    let action = if coin < epsilon {
                        actions[random_action].clone()
                    } else {
                        memory.best_action(&q.state, cfg.k)?.action
                    };
                    let nonce = mix(&[cfg.seed, t as u64, pos as u64]);
                    jobs.push(Job::new(pipeline, q, Some(action), nonce)?);
                }
                let stats = apply_batch(memory, pipeline, &jobs, cfg.max_in_flight, |pos| {
                    format!("iteration {t}, sample {pos}")
                })?;
                iterations.push(IterationStats {
                    iteration: t,
                    epsilon,
                    mean_reward: stats.0,
                    writes: stats.1,
                    fill_ratio: fill(memory),
                });
                on_iteration(t, memory)?;
            }
            "epsilon_greedy".to_string()
        }
        ExplorationMode::Exhaustive => {
            let mut seen = HashSet::new();
            let mut sweep = 0;
            for q in &queries {
                if !seen.insert(q.state.state_id().to_string()) {
                    continue;
                }
                let jobs = actions
                    .iter()
                    .enumerate()
                    .map(|(ai, a)| {
                        Job::new(
                            pipeline,
                            q,
                            Some(a.clone()),
                            mix(&[cfg.seed, sweep as u64, ai as u64]),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let stats = apply_batch(memory, pipeline, &jobs, cfg.max_in_flight, |ai| {
                    format!("exhaustive sweep {sweep}, action {ai}")
                })?;
                iterations.push(IterationStats {
                    iteration: sweep,
                    epsilon: 1.0,
                    mean_reward: stats.0,
                    writes: stats.1,
                    fill_ratio: fill(memory),
                });
                on_iteration(sweep, memory)?;
                sweep += 1;
            }
            "exhaustive (harness extension)".to_string()
        }
    };
    Ok(RunReport {
        seed: cfg.seed,
        exploration,
        states,
        actions_per_state: actions.len(),
        filled_pairs: memory.filled_pairs(),
        fill_ratio: fill(memory),
        iterations,
        wall_clock_ms: Some(started.elapsed().as_secs_f64() * 1e3),
    })
}

pub fn train(
    cfg: &TrainConfig,
    train_set: &[Record],
    pipeline: &Pipeline<'_>,
    memory: &mut EpisodicMemory,
) -> Result<RunReport> {
    train_with_hook(cfg, train_set, pipeline, memory, &mut |_, _| Ok(()))
}

// Scores a batch, then writes results in job order. Writes preceding the
// first failure are kept.
fn apply_batch(
    memory: &mut EpisodicMemory,
    pipeline: &Pipeline<'_>,
    jobs: &[Job<'_>],
    in_flight: usize,
    where_: impl Fn(usize) -> String,
) -> Result<(f64, usize)> {
    let outcomes = score_all(pipeline.oracle, jobs, in_flight);
    let mut total = 0.0;
    for (pos, (job, outcome)) in jobs.iter().zip(outcomes).enumerate() {
        let outcome = outcome.map_err(|e| e.context(where_(pos)))?;
        let action = job.action.as_ref().expect("training jobs carry an action");
        memory
            .write(&job.query.state, action, outcome.reward)
            .map_err(|e| e.context(where_(pos)))?;
        total += outcome.reward;
    }
    Ok((total / jobs.len().max(1) as f64, jobs.len()))
}

/// Memory-guided ordering for one test query.
#[derive(Debug, Clone)]
pub struct Inference {
    pub best: BestAction,
    pub state: StateRecord,
    /// Retrieved examples in canonical rank order.
    pub selected: Vec<Example>,
    /// Examples in prompt order.
    pub ordered: Vec<Example>,
    pub prompt: String,
}

impl Inference {
    pub fn action(&self) -> &Action {
        &self.best.action
    }
}

pub fn infer_prepared(
    memory: &EpisodicMemory,
    query: &PreparedQuery,
    pipeline: &Pipeline<'_>,
    k: usize,
) -> Result<Inference> {
    let best = memory.best_action(&query.state, k)?;
    let ordered = reorder(&query.selected, &best.action)?;
    let prompt = build_prompt(pipeline.prompt, &ordered, &query.record.fields)?;
    Ok(Inference {
        best,
        state: query.state.clone(),
        selected: query.selected.clone(),
        ordered,
        prompt,
    })
}

pub fn infer(
    memory: &EpisodicMemory,
    query: &Record,
    pipeline: &Pipeline<'_>,
    k: usize,
) -> Result<Inference> {
    let prepared = pipeline.prepare(std::slice::from_ref(query), memory.m())?;
    infer_prepared(memory, &prepared[0], pipeline, k)
}

/// Orderings compared in evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Poem,
    ZeroShot,
    Random,
    Ascending,
    Descending,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Poem,
        Method::ZeroShot,
        Method::Random,
        Method::Ascending,
        Method::Descending,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Poem => "poem",
            Method::ZeroShot => "zero_shot",
            Method::Random => "random",
            Method::Ascending => "ascending",
            Method::Descending => "descending",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub metric: String,
    pub metric_value: f64,
    pub mean_reward: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub results: Vec<MethodResult>,
}

impl EvalReport {
    pub fn get(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

/// Scores every test query under each method. Noise nonces depend only on
/// `(seed, query position)`, so methods see common random numbers.
pub fn evaluate(
    memory: &EpisodicMemory,
    test_set: &[Record],
    pipeline: &Pipeline<'_>,
    k: usize,
    seed: u64,
    methods: &[Method],
    max_in_flight: usize,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(PoemError::invalid("test set is empty"));
    }
    let m = memory.m();
    let queries = pipeline.prepare(test_set, m)?;
    let actions = enumerate_actions(m)?;
    let mut results = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x5eed]));
        let mut jobs = Vec::with_capacity(queries.len());
        for (pos, q) in queries.iter().enumerate() {
            let action = match method {
                Method::Poem => Some(memory.best_action(&q.state, k)?.action),
                Method::ZeroShot => None,
                Method::Random => Some(actions[rng.random_range(0..actions.len())].clone()),
                Method::Ascending => Some(Action::reversed(m)),
                Method::Descending => Some(Action::identity(m)),
            };
            jobs.push(Job::new(
                pipeline,
                q,
                action,
                mix(&[seed, 0xe7a1, pos as u64]),
            )?);
        }
        let outcomes = score_all(pipeline.oracle, &jobs, max_in_flight);
        let mut reward = 0.0;
        let mut hits = 0usize;
        for (pos, o) in outcomes.into_iter().enumerate() {
            let o = o.map_err(|e| e.context(format!("{} on test query {pos}", method.name())))?;
            reward += o.reward;
            hits += usize::from(o.correct);
        }
        let n = queries.len() as f64;
        results.push(MethodResult {
            method,
            metric: pipeline.oracle.metric().to_string(),
            metric_value: hits as f64 / n,
            mean_reward: reward / n,
            queries: queries.len(),
        });
    }
    Ok(EvalReport { seed, results })
}
