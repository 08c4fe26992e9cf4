//! Reward functions and the language-model scoring contract.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::encoder::{fnv1a, Embedding};
use crate::error::{PoemError, Result};
use crate::selection::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Classification,
    Sequence,
    ExactMatch,
}

fn default_lambda1() -> f64 {
    2.0
}

fn default_lambda2() -> f64 {
    1.8
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub kind: RewardKind,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    /// Trim + casefold before exact-match comparison.
    #[serde(default = "default_true")]
    pub normalize_exact_match: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            kind: RewardKind::Classification,
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            normalize_exact_match: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PoemError::invalid(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(PoemError::invalid(format!(
            "{what} contains a non-finite log-prob"
        )));
    }
    Ok(())
}

/// `lambda1 * logP(truth) - lambda2 * max_{other} logP(other)`.
pub fn classification_reward(
    cfg: &RewardConfig,
    truth_label: &str,
    scores: &BTreeMap<String, f64>,
) -> Result<f64> {
    cfg.validate()?;
    if scores.len() < 2 {
        return Err(PoemError::invalid(format!(
            "classification reward needs at least 2 labels, got {}",
            scores.len()
        )));
    }
    check_finite(scores.values().copied(), "label scores")?;
    let truth = *scores.get(truth_label).ok_or_else(|| {
        PoemError::invalid(format!("truth label `{truth_label}` missing from scores"))
    })?;
    let rival = scores
        .iter()
        .filter(|(label, _)| label.as_str() != truth_label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(cfg.lambda1 * truth - cfg.lambda2 * rival)
}

/// `lambda1 * sum(truth) - lambda2 * sum(rival)` over token log-probs.
pub fn sequence_reward(cfg: &RewardConfig, truth: &[f64], rival: &[f64]) -> Result<f64> {
    cfg.validate()?;
    if truth.is_empty() || rival.is_empty() {
        return Err(PoemError::invalid(
            "sequence reward needs non-empty token lists",
        ));
    }
    check_finite(truth.iter().copied(), "truth sequence")?;
    check_finite(rival.iter().copied(), "rival sequence")?;
    Ok(cfg.lambda1 * truth.iter().sum::<f64>() - cfg.lambda2 * rival.iter().sum::<f64>())
}

pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// 1.0 when the answers agree (after normalization if enabled), else 0.0.
pub fn exact_match_reward(truth: &str, generated: &str, normalize: bool) -> f64 {
    let equal = if normalize {
        normalize_answer(truth) == normalize_answer(generated)
    } else {
        truth == generated
    };
    if equal {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Classify,
    Sequence,
    Generate,
}

impl From<RewardKind> for ScoreMode {
    fn from(kind: RewardKind) -> Self {
        match kind {
            RewardKind::Classification => ScoreMode::Classify,
            RewardKind::Sequence => ScoreMode::Sequence,
            RewardKind::ExactMatch => ScoreMode::Generate,
        }
    }
}

/// Request body sent to an LM backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub mode: ScoreMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
}

/// Response body from an LM backend. Which fields must be present depends on
/// the request mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_label_logprob: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rival_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_text: Option<String>,
}

impl ScoreResponse {
    /// Checks that the fields required by `mode` are present and finite.
    pub fn validate_for(&self, mode: ScoreMode) -> std::result::Result<(), String> {
        let finite = |vals: &mut dyn Iterator<Item = &f64>, what: &str| {
            if vals.filter(|v| !v.is_finite()).count() > 0 {
                Err(format!("`{what}` contains a non-finite value"))
            } else {
                Ok(())
            }
        };
        match mode {
            ScoreMode::Classify => {
                let map = self
                    .per_label_logprob
                    .as_ref()
                    .ok_or("missing `per_label_logprob`")?;
                finite(&mut map.values(), "per_label_logprob")
            }
            ScoreMode::Sequence => {
                let truth = self
                    .truth_logprobs
                    .as_ref()
                    .ok_or("missing `truth_logprobs`")?;
                let rival = self
                    .rival_logprobs
                    .as_ref()
                    .ok_or("missing `rival_logprobs`")?;
                finite(&mut truth.iter(), "truth_logprobs")?;
                finite(&mut rival.iter(), "rival_logprobs")
            }
            ScoreMode::Generate => self
                .generated_text
                .as_ref()
                .map(|_| ())
                .ok_or_else(|| "missing `generated_text`".to_string()),
        }
    }
}

/// A downstream language model that can score prompts.
pub trait LmBackend: Send + Sync {
    fn id(&self) -> &str;

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse>;
}

impl<T: LmBackend + ?Sized> LmBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        (**self).score(request)
    }
}

/// Sends `prompt` to the backend and checks the response shape.
pub fn score_prompt<B: LmBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    mode: ScoreMode,
    labels: Option<&[String]>,
    truth: Option<&str>,
) -> Result<ScoreResponse> {
    if prompt.is_empty() {
        return Err(PoemError::invalid("prompt must not be empty"));
    }
    if mode == ScoreMode::Classify && labels.is_none_or(|l| l.len() < 2) {
        return Err(PoemError::invalid(
            "classify requests need at least 2 labels",
        ));
    }
    let request = ScoreRequest {
        prompt: prompt.to_string(),
        mode,
        labels: labels.map(<[String]>::to_vec),
        truth: truth.map(str::to_string),
    };
    let response = backend.score(&request)?;
    response
        .validate_for(mode)
        .map_err(|detail| PoemError::Protocol {
            backend: backend.id().to_string(),
            detail,
        })?;
    Ok(response)
}

/// Offline stand-in LM whose log-probs are a deterministic hash of
/// `(seed, prompt, label)`. Useful for exercising pipelines without a model.
#[derive(Debug, Clone)]
pub struct HashLm {
    seed: u64,
    id: String,
}

impl HashLm {
    pub fn new(seed: u64) -> Self {
        HashLm {
            seed,
            id: format!("hash-lm(seed={seed})"),
        }
    }

    fn unit(&self, parts: &[&str]) -> f64 {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        for p in parts {
            bytes.extend_from_slice(p.as_bytes());
            bytes.push(0);
        }
        // top 53 bits -> [0, 1)
        (fnv1a(&bytes) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn token_logprobs(&self, prompt: &str, text: &str) -> Vec<f64> {
        let n = text.split_whitespace().count().max(1);
        (0..n)
            .map(|i| -0.05 - 3.0 * self.unit(&[prompt, text, &i.to_string()]))
            .collect()
    }
}

impl LmBackend for HashLm {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let p = request.prompt.as_str();
        Ok(match request.mode {
            ScoreMode::Classify => {
                let labels = request.labels.as_deref().unwrap_or_default();
                let logits: Vec<f64> = labels.iter().map(|l| 4.0 * self.unit(&[p, l])).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                ScoreResponse {
                    per_label_logprob: Some(
                        labels
                            .iter()
                            .cloned()
                            .zip(logits.iter().map(|x| x - lse))
                            .collect(),
                    ),
                    ..Default::default()
                }
            }
            ScoreMode::Sequence => {
                let truth = request.truth.as_deref().unwrap_or("");
                ScoreResponse {
                    truth_logprobs: Some(self.token_logprobs(p, truth)),
                    rival_logprobs: Some(self.token_logprobs(p, "<rival>")),
                    ..Default::default()
                }
            }
            ScoreMode::Generate => {
                let truth = request.truth.as_deref().unwrap_or("");
                let text = if self.unit(&[p, "generate"]) < 0.5 {
                    truth.to_string()
                } else {
                    String::from("unknown")
                };
                ScoreResponse {
                    generated_text: Some(text),
                    ..Default::default()
                }
            }
        })
    }
}

/// Everything an oracle may look at when scoring one ordering.
#[derive(Debug, Clone, Copy)]
pub struct Scoring<'a> {
    pub query: &'a Record,
    pub state: &'a Embedding,
    /// Demonstrations in prompt order; empty for zero-shot.
    pub ordered: &'a [Example],
    pub prompt: &'a str,
    /// Per-call value for seeded noise, independent of scheduling.
    pub nonce: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub reward: f64,
    /// Whether the task metric counts this as a hit (accuracy / EM / optimum reached).
    pub correct: bool,
}

/// Turns a prompt and its ground truth into a reward.
pub trait RewardOracle: Send + Sync {
    fn id(&self) -> &str;

    /// Metric name reported in evaluation tables.
    fn metric(&self) -> &str;

    fn evaluate(&self, input: &Scoring<'_>) -> Result<Outcome>;
}

/// Oracle backed by a language model and one of the reward functions.
pub struct LmOracle<B> {
    backend: B,
    cfg: RewardConfig,
    labels: Option<Vec<String>>,
    verbalizer: Option<BTreeMap<String, String>>,
}

impl<B: LmBackend> LmOracle<B> {
    /// `labels` is the label space (classification); `verbalizer` maps
    /// labels to the surface strings the LM is asked about.
    pub fn new(
        backend: B,
        cfg: RewardConfig,
        labels: Option<Vec<String>>,
        verbalizer: Option<BTreeMap<String, String>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind == RewardKind::Classification && labels.as_ref().is_none_or(|l| l.len() < 2) {
            return Err(PoemError::invalid(
                "classification reward needs a label space with at least 2 labels",
            ));
        }
        Ok(LmOracle {
            backend,
            cfg,
            labels,
            verbalizer,
        })
    }

    fn surface(&self, label: &str) -> String {
        self.verbalizer
            .as_ref()
            .and_then(|v| v.get(label))
            .cloned()
            .unwrap_or_else(|| label.to_string())
    }
}

impl<B: LmBackend> RewardOracle for LmOracle<B> {
    fn id(&self) -> &str {
        self.backend.id()
    }

    fn metric(&self) -> &str {
        match self.cfg.kind {
            RewardKind::Classification | RewardKind::Sequence => "accuracy",
            RewardKind::ExactMatch => "exact_match",
        }
    }

    fn evaluate(&self, input: &Scoring<'_>) -> Result<Outcome> {
        let truth = input.query.label.as_deref().ok_or_else(|| {
            PoemError::invalid(format!(
                "query {} has no ground-truth label",
                input.query.index
            ))
        })?;
        let truth = self.surface(truth);
        let mode = ScoreMode::from(self.cfg.kind);
        match self.cfg.kind {
            RewardKind::Classification => {
                let labels: Vec<String> = self
                    .labels
                    .as_deref()
                    .unwrap_or_default()
                    .iter()
                    .map(|l| self.surface(l))
                    .collect();
                let resp = score_prompt(
                    &self.backend,
                    input.prompt,
                    mode,
                    Some(&labels),
                    Some(&truth),
                )?;
                let scores = resp.per_label_logprob.expect("validated");
                let reward = classification_reward(&self.cfg, &truth, &scores)?;
                let predicted = scores
                    .iter()
                    .fold(None::<(&String, f64)>, |best, (l, &v)| match best {
                        Some((_, b)) if b >= v => best,
                        _ => Some((l, v)),
                    })
                    .map(|(l, _)| l.as_str());
                Ok(Outcome {
                    reward,
                    correct: predicted == Some(truth.as_str()),
                })
            }
            RewardKind::Sequence => {
                let resp = score_prompt(&self.backend, input.prompt, mode, None, Some(&truth))?;
                let t = resp.truth_logprobs.expect("validated");
                let r = resp.rival_logprobs.expect("validated");
                let reward = sequence_reward(&self.cfg, &t, &r)?;
                Ok(Outcome {
                    reward,
                    correct: t.iter().sum::<f64>() > r.iter().sum::<f64>(),
                })
            }
            RewardKind::ExactMatch => {
                let resp = score_prompt(&self.backend, input.prompt, mode, None, Some(&truth))?;
                let generated = resp.generated_text.expect("validated");
                let reward = exact_match_reward(&truth, &generated, self.cfg.normalize_exact_match);
                Ok(Outcome {
                    reward,
                    correct: reward == 1.0,
                })
            }
        }
    }
}
