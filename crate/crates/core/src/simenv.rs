//! A synthetic, order-sensitive environment with a planted optimum.
//!
//! The reward of an ordering is `sum_i position_weights[i] * affinity(slot i)`
//! plus optional seeded Gaussian noise. It stands in for a downstream LM so
//! that every claim about the optimizer can be checked against brute force.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action::{enumerate_actions, reorder, Action};
use crate::dataset::Record;
use crate::encoder::{
    cosine_similarity, hash_test_encoder, Embedding, EncoderBackend, HashEncoder,
};
use crate::engine::TrainConfig;
use crate::error::{PoemError, Result};
use crate::reward::{Outcome, RewardOracle, Scoring};
use crate::selection::Example;

/// Field name carrying the text of synthetic records.
pub const TEXT_FIELD: &str = "text";

/// Relative tolerance under which two noiseless rewards count as tied.
const TIE_EPS: f64 = 1e-12;

/// How an example's affinity to the query is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    /// Affinity is the cosine similarity: heavy slots want close examples.
    Descending,
    /// Affinity is `1 - cosine`: heavy slots want far examples.
    Ascending,
    /// Affinity of the example with similarity rank `r` is `values[r - 1]`.
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasLandscape {
    pub position_weights: Vec<f64>,
    pub preference: Preference,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BiasLandscape {
    pub fn new(position_weights: Vec<f64>, preference: Preference) -> Result<Self> {
        let l = BiasLandscape {
            position_weights,
            preference,
            noise_sigma: 0.0,
            seed: 0,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Result<Self> {
        self.noise_sigma = sigma;
        self.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.position_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.position_weights.is_empty() {
            return Err(PoemError::invalid(
                "landscape needs at least one position weight",
            ));
        }
        if self.position_weights.iter().any(|w| !w.is_finite()) {
            return Err(PoemError::invalid("position weights must be finite"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(PoemError::invalid(
                "noise_sigma must be a finite value >= 0",
            ));
        }
        if let Preference::Custom(v) = &self.preference {
            if v.len() != self.m() || v.iter().any(|x| !x.is_finite()) {
                return Err(PoemError::invalid(format!(
                    "custom preference needs {} finite values",
                    self.m()
                )));
            }
        }
        Ok(())
    }

    /// Deterministic part of the reward.
    pub fn noiseless_reward(&self, s: &Embedding, ordered: &[Example]) -> Result<f64> {
        if ordered.len() != self.m() {
            return Err(PoemError::invalid(format!(
                "landscape expects {} examples, got {}",
                self.m(),
                ordered.len()
            )));
        }
        let sims = ordered
            .iter()
            .map(|e| cosine_similarity(s, &e.embedding))
            .collect::<Result<Vec<_>>>()?;
        let affinity: Vec<f64> = match &self.preference {
            Preference::Descending => sims,
            Preference::Ascending => sims.iter().map(|c| 1.0 - c).collect(),
            Preference::Custom(values) => {
                let ranks = similarity_ranks(&sims, ordered);
                ranks.iter().map(|&r| values[r]).collect()
            }
        };
        Ok(self
            .position_weights
            .iter()
            .zip(&affinity)
            .map(|(w, a)| w * a)
            .sum())
    }

    /// Noise draw for call `nonce`; zero when `noise_sigma == 0`.
    pub fn noise(&self, nonce: u64) -> f64 {
        if self.noise_sigma == 0.0 {
            return 0.0;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ nonce.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let z: f64 = rng.sample(StandardNormal);
        self.noise_sigma * z
    }
}

// zero-based similarity rank of each slot (ties by example index)
fn similarity_ranks(sims: &[f64], ordered: &[Example]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .total_cmp(&sims[a])
            .then_with(|| ordered[a].index.cmp(&ordered[b].index))
    });
    let mut ranks = vec![0; sims.len()];
    for (rank, slot) in order.into_iter().enumerate() {
        ranks[slot] = rank;
    }
    ranks
}

/// Reward of `ordered` for state `s`: noiseless part plus the noise draw for `nonce`.
pub fn synth_reward(
    landscape: &BiasLandscape,
    s: &Embedding,
    ordered: &[Example],
    nonce: u64,
) -> Result<f64> {
    Ok(landscape.noiseless_reward(s, ordered)? + landscape.noise(nonce))
}

/// Sorts examples into canonical rank order: descending similarity to `s`,
/// ties by ascending index.
pub fn canonicalize(s: &Embedding, examples: &[Example]) -> Result<Vec<Example>> {
    let mut scored = examples
        .iter()
        .map(|e| Ok((cosine_similarity(s, &e.embedding)?, e)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|(sa, ea), (sb, eb)| sb.total_cmp(sa).then_with(|| ea.index.cmp(&eb.index)));
    Ok(scored.into_iter().map(|(_, e)| e.clone()).collect())
}

/// Exact argmax of the noiseless reward over all `m!` actions, lexicographic
/// tie-break. `examples` may be supplied in any order.
pub fn brute_force_best(
    landscape: &BiasLandscape,
    s: &Embedding,
    examples: &[Example],
) -> Result<Action> {
    Ok(brute_force_scan(landscape, s, examples)?.0)
}

/// Like [`brute_force_best`], also returning the optimal noiseless reward.
pub fn brute_force_scan(
    landscape: &BiasLandscape,
    s: &Embedding,
    examples: &[Example],
) -> Result<(Action, f64)> {
    let canonical = canonicalize(s, examples)?;
    let mut best: Option<(Action, f64)> = None;
    for action in enumerate_actions(canonical.len())? {
        let value = landscape.noiseless_reward(s, &reorder(&canonical, &action)?)?;
        let better = match &best {
            None => true,
            Some((_, b)) => value > b + TIE_EPS * (1.0 + b.abs()),
        };
        if better {
            best = Some((action, value));
        }
    }
    best.ok_or_else(|| PoemError::invalid("no examples to order"))
}

fn default_dispersion() -> f64 {
    0.3
}

fn default_test_radius() -> f64 {
    0.1
}

/// Sizes and geometry of a generated task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub dim: usize,
    /// Number of label clusters `G`.
    pub labels: usize,
    pub train_size: usize,
    pub ic_size: usize,
    pub test_size: usize,
    /// Spread of members around their cluster centre.
    #[serde(default = "default_dispersion")]
    pub dispersion: f64,
    /// Spread of test states around the training state they derive from.
    #[serde(default = "default_test_radius")]
    pub test_radius: f64,
    /// Attach a label space so selection balances labels.
    #[serde(default = "default_balance")]
    pub balance_labels: bool,
}

fn default_balance() -> bool {
    true
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(PoemError::invalid("synthetic dim must be >= 2"));
        }
        if self.labels == 0 || self.train_size == 0 || self.ic_size == 0 || self.test_size == 0 {
            return Err(PoemError::invalid(
                "synthetic sizes and label count must be positive",
            ));
        }
        for (name, v) in [
            ("dispersion", self.dispersion),
            ("test_radius", self.test_radius),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PoemError::invalid(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Generated splits with planted embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub train: Vec<Record>,
    pub ic: Vec<Record>,
    pub test: Vec<Record>,
    pub label_space: Option<Vec<String>>,
    pub embeddings: BTreeMap<String, Embedding>,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn embedding_of(&self, text: &str) -> Option<&Embedding> {
        self.embeddings.get(text)
    }

    /// Encoder that returns the planted embeddings; see [`PlantedEncoder`].
    pub fn encoder(&self) -> PlantedEncoder {
        PlantedEncoder {
            table: self.embeddings.clone(),
            fallback: hash_test_encoder(self.dim, self.seed).expect("dim validated"),
            id: format!("planted(seed={})", self.seed),
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn around(rng: &mut ChaCha8Rng, centre: &[f64], spread: f64) -> Vec<f64> {
    let scale = spread / (centre.len() as f64).sqrt();
    let noise = gaussian_vec(rng, centre.len());
    unit(
        centre
            .iter()
            .zip(noise)
            .map(|(c, n)| c + scale * n)
            .collect(),
    )
}

pub fn label_name(g: usize) -> String {
    format!("label-{g}")
}

/// Builds `G` clusters on the unit sphere. Training and in-context records
/// are assigned to clusters round-robin; test state `i` is a perturbation of
/// training state `i mod L`.
pub fn generate_task(seed: u64, spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..spec.labels)
        .map(|_| unit(gaussian_vec(&mut rng, spec.dim)))
        .collect();
    let mut embeddings = BTreeMap::new();
    let mut make = |rng: &mut ChaCha8Rng,
                    prefix: &str,
                    i: usize,
                    centre: &[f64],
                    spread: f64,
                    label: usize| {
        let text = format!("{prefix}-{i:04}");
        let emb = Embedding::new(around(rng, centre, spread)).expect("unit vector");
        embeddings.insert(text.clone(), emb.clone());
        (
            Record::new(i as u64, [(TEXT_FIELD.to_string(), text)]).with_label(label_name(label)),
            emb,
        )
    };

    let mut train = Vec::with_capacity(spec.train_size);
    let mut train_vecs = Vec::with_capacity(spec.train_size);
    for i in 0..spec.train_size {
        let g = i % spec.labels;
        let (rec, emb) = make(&mut rng, "train", i, &centres[g], spec.dispersion, g);
        train.push(rec);
        train_vecs.push((g, emb));
    }
    let ic = (0..spec.ic_size)
        .map(|i| {
            let g = i % spec.labels;
            make(&mut rng, "ic", i, &centres[g], spec.dispersion, g).0
        })
        .collect();
    let test = (0..spec.test_size)
        .map(|i| {
            let (g, base) = &train_vecs[i % spec.train_size];
            make(&mut rng, "test", i, base.values(), spec.test_radius, *g).0
        })
        .collect();
    Ok(SyntheticTask {
        train,
        ic,
        test,
        label_space: spec
            .balance_labels
            .then(|| (0..spec.labels).map(label_name).collect()),
        embeddings,
        dim: spec.dim,
        seed,
    })
}

/// Returns planted embeddings for generated texts and falls back to a hash
/// encoder of the same dimension for anything else.
#[derive(Debug, Clone)]
pub struct PlantedEncoder {
    table: BTreeMap<String, Embedding>,
    fallback: HashEncoder,
    id: String,
}

impl EncoderBackend for PlantedEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn encode(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| match self.table.get(*t) {
                Some(e) => Ok(e.clone()),
                None => Ok(self.fallback.encode(&[t])?.remove(0)),
            })
            .collect()
    }
}

/// Reward oracle over a [`BiasLandscape`]. An ordering counts as correct
/// when its noiseless reward reaches the brute-force optimum.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    landscape: BiasLandscape,
    id: String,
}

impl SyntheticOracle {
    pub fn new(landscape: BiasLandscape) -> Result<Self> {
        landscape.validate()?;
        Ok(SyntheticOracle {
            id: format!(
                "synthetic(m={}, sigma={})",
                landscape.m(),
                landscape.noise_sigma
            ),
            landscape,
        })
    }

    pub fn landscape(&self) -> &BiasLandscape {
        &self.landscape
    }
}

impl RewardOracle for SyntheticOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn metric(&self) -> &str {
        "optimal_rate"
    }

    fn evaluate(&self, input: &Scoring<'_>) -> Result<Outcome> {
        let noise = self.landscape.noise(input.nonce);
        if input.ordered.is_empty() {
            // no demonstrations contribute anything
            return Ok(Outcome {
                reward: noise,
                correct: false,
            });
        }
        let value = self
            .landscape
            .noiseless_reward(input.state, input.ordered)?;
        let (_, best) = brute_force_scan(&self.landscape, input.state, input.ordered)?;
        Ok(Outcome {
            reward: value + noise,
            correct: value >= best - TIE_EPS * (1.0 + best.abs()),
        })
    }
}

/// A scenario file: task geometry, landscape and optional training overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub task: TaskSpec,
    pub landscape: BiasLandscape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PoemError::Load {
            context: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let scenario: Scenario = serde_json::from_str(&text).map_err(|e| PoemError::Load {
            context: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            detail: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.landscape.validate()?;
        if let Some(t) = &self.train {
            t.validate()?;
            if t.m != self.landscape.m() {
                return Err(PoemError::invalid(format!(
                    "train.m = {} but the landscape has {} position weights",
                    t.m,
                    self.landscape.m()
                )));
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SyntheticTask> {
        generate_task(self.seed, &self.task)
    }
}
