//! Task configuration: one JSON document naming the data, prompt, reward,
//! backends and training parameters. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use poem_core::dataset::read_jsonl;
use poem_core::remote::{
    resolve_url, RemoteEncoder, RemoteLm, RetryPolicy, EMBED_URL_ENV, LM_URL_ENV,
};
use poem_core::reward::HashLm;
use poem_core::simenv::{Scenario, SyntheticOracle, TEXT_FIELD};
use poem_core::{
    hash_test_encoder, CachedEncoder, EncoderBackend, InContextSet, LmOracle, Method, Pipeline,
    PromptSpec, Record, RetrievalField, RewardConfig, RewardKind, RewardOracle, Template,
    TrainConfig,
};
use serde::Deserialize;

/// A configuration problem detected before any work starts (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub ic: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Synthetic scenario file; replaces the three JSONL splits.
    pub scenario: Option<PathBuf>,
}

fn default_hash_dim() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    Hash {
        #[serde(default = "default_hash_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Falls back to `POEM_EMBED_URL` when `url` is absent.
    Remote {
        url: Option<String>,
        dim: Option<usize>,
        max_attempts: Option<u32>,
    },
    /// The scenario's own embeddings.
    Planted,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum LmConfig {
    Hash {
        #[serde(default)]
        seed: u64,
    },
    /// Falls back to `POEM_LM_URL` when `url` is absent.
    Remote {
        url: Option<String>,
        max_attempts: Option<u32>,
    },
    /// The scenario's bias landscape.
    Synthetic,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub name: String,
    pub data: DataConfig,
    /// Field names every record carries; templates may only use these.
    pub fields: Option<Vec<String>>,
    pub retrieval_field: Option<RetrievalField>,
    pub label_space: Option<Vec<String>>,
    pub prompt: Option<PromptSpec>,
    pub reward: Option<RewardConfig>,
    pub encoder: Option<EncoderConfig>,
    pub lm: Option<LmConfig>,
    pub train: Option<TrainConfig>,
    /// Methods compared by `eval`; all of them by default.
    pub methods: Option<Vec<Method>>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl TaskConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: TaskConfig =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// A config that runs a scenario with its planted encoder and synthetic oracle.
    pub fn for_scenario(path: &Path) -> Self {
        TaskConfig {
            name: String::new(),
            data: DataConfig {
                scenario: Some(path.to_path_buf()),
                ..DataConfig::default()
            },
            fields: None,
            retrieval_field: None,
            label_space: None,
            prompt: None,
            reward: None,
            encoder: None,
            lm: None,
            train: None,
            methods: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Validates everything that can be checked without touching a backend
    /// and loads the datasets.
    pub fn plan(&self) -> anyhow::Result<Plan> {
        let (data, scenario) = self.load_data()?;
        let synthetic = scenario.is_some();

        let fields = match (&self.fields, synthetic) {
            (Some(f), _) => f.clone(),
            (None, true) => vec![TEXT_FIELD.to_string()],
            (None, false) => return Err(invalid("fields: required when data uses JSONL files")),
        };
        if fields.is_empty() {
            return Err(invalid("fields: must name at least one field"));
        }
        let declared: BTreeSet<&str> = fields.iter().map(String::as_str).collect();

        let retrieval = match (&self.retrieval_field, synthetic) {
            (Some(r), _) => r.clone(),
            (None, true) => RetrievalField::Single(TEXT_FIELD.to_string()),
            (None, false) => RetrievalField::Single(fields[0].clone()),
        };
        for name in retrieval.names() {
            if !declared.contains(name) {
                return Err(invalid(format!(
                    "retrieval_field: `{name}` is not a declared field (fields: {fields:?})"
                )));
            }
        }

        let prompt = match (&self.prompt, synthetic) {
            (Some(p), _) => p.clone(),
            (None, true) => PromptSpec::new(Template::new("{text} => {label}")?),
            (None, false) => return Err(invalid("prompt: required when data uses JSONL files")),
        };
        prompt
            .validate()
            .map_err(|e| invalid(format!("prompt: {e}")))?;
        check_placeholders("prompt.template", &prompt.template, &declared)?;
        if let Some(q) = &prompt.query_template {
            check_placeholders("prompt.query_template", q, &declared)?;
        }

        let label_space = match (&self.label_space, &scenario) {
            (Some(l), _) => Some(l.clone()),
            (None, Some(sc)) => sc.generate()?.label_space,
            (None, None) => None,
        };
        if let (Some(labels), Some(choices)) = (&label_space, prompt.template.answer_choices()) {
            for key in choices.keys() {
                if !labels.contains(key) {
                    return Err(invalid(format!(
                        "prompt.template.answer_choices: `{key}` is not in label_space {labels:?}"
                    )));
                }
            }
        }

        let mut train_cfg = match (&self.train, &scenario) {
            (Some(t), _) => t.clone(),
            (None, Some(sc)) => sc.train.clone().unwrap_or_default(),
            (None, None) => TrainConfig::default(),
        };
        train_cfg
            .validate()
            .map_err(|e| invalid(format!("train: {e}")))?;
        if train_cfg.capacity.is_none() {
            train_cfg.capacity = Some(data.train.len());
        }

        let encoder = match (&self.encoder, synthetic) {
            (Some(e), _) => e.clone(),
            (None, true) => EncoderConfig::Planted,
            (None, false) => return Err(invalid("encoder: required when data uses JSONL files")),
        };
        let lm = match (&self.lm, synthetic) {
            (Some(l), _) => l.clone(),
            (None, true) => LmConfig::Synthetic,
            (None, false) => return Err(invalid("lm: required when data uses JSONL files")),
        };
        if !synthetic && matches!(encoder, EncoderConfig::Planted) {
            return Err(invalid("encoder: `planted` needs data.scenario"));
        }
        if let EncoderConfig::Hash { dim, .. } = encoder {
            if dim < 2 {
                return Err(invalid(format!("encoder.dim: must be >= 2, got {dim}")));
            }
        }
        match (&lm, &scenario) {
            (LmConfig::Synthetic, None) => {
                return Err(invalid("lm: `synthetic` needs data.scenario"))
            }
            (LmConfig::Synthetic, Some(sc)) if sc.landscape.m() != train_cfg.m => {
                return Err(invalid(format!(
                    "train.m: {} does not match the scenario landscape's {} positions",
                    train_cfg.m,
                    sc.landscape.m()
                )))
            }
            _ => {}
        }
        let reward = self.reward.clone().unwrap_or_default();
        reward
            .validate()
            .map_err(|e| invalid(format!("reward: {e}")))?;
        if !matches!(lm, LmConfig::Synthetic)
            && reward.kind == RewardKind::Classification
            && label_space.as_ref().is_none_or(|l| l.len() < 2)
        {
            return Err(invalid(
                "label_space: classification reward needs at least 2 labels",
            ));
        }
        let methods = self.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
        if methods.is_empty() {
            return Err(invalid("methods: must list at least one method"));
        }

        for (split, records) in [
            ("train", &data.train),
            ("ic", &data.ic),
            ("test", &data.test),
        ] {
            check_records(split, records, &declared)?;
        }
        if let Some(labels) = &label_space {
            for r in &data.ic {
                match &r.label {
                    Some(l) if labels.contains(l) => {}
                    other => {
                        return Err(invalid(format!(
                            "data.ic: record {} has label {other:?}, expected one of {labels:?}",
                            r.index
                        )))
                    }
                }
            }
        }
        Ok(Plan {
            name: self.name.clone(),
            data,
            scenario,
            retrieval,
            label_space,
            prompt,
            reward,
            encoder,
            lm,
            train: train_cfg,
            methods,
        })
    }

    fn load_data(&self) -> anyhow::Result<(Splits, Option<Scenario>)> {
        let d = &self.data;
        if let Some(path) = &d.scenario {
            if d.train.is_some() || d.ic.is_some() || d.test.is_some() {
                return Err(invalid(
                    "data: give either `scenario` or JSONL splits, not both",
                ));
            }
            let path = self.resolve(path);
            if !path.exists() {
                return Err(invalid(format!(
                    "data.scenario: file not found: {}",
                    path.display()
                )));
            }
            let scenario =
                Scenario::load(&path).map_err(|e| invalid(format!("data.scenario: {e}")))?;
            let task = scenario.generate()?;
            let splits = Splits {
                train: task.train,
                ic: task.ic,
                test: task.test,
            };
            return Ok((splits, Some(scenario)));
        }
        let read =
            |name: &str, p: &Option<PathBuf>, required: bool| -> anyhow::Result<Vec<Record>> {
                let Some(p) = p else {
                    return if required {
                        Err(invalid(format!("data.{name}: required")))
                    } else {
                        Ok(Vec::new())
                    };
                };
                let path = self.resolve(p);
                if !path.exists() {
                    return Err(invalid(format!(
                        "data.{name}: file not found: {}",
                        path.display()
                    )));
                }
                read_jsonl(&path).map_err(|e| invalid(format!("data.{name}: {e}")))
            };
        let splits = Splits {
            train: read("train", &d.train, true)?,
            ic: read("ic", &d.ic, true)?,
            test: read("test", &d.test, false)?,
        };
        Ok((splits, None))
    }
}

fn check_placeholders(path: &str, t: &Template, declared: &BTreeSet<&str>) -> anyhow::Result<()> {
    for name in t.field_placeholders() {
        if !declared.contains(name) {
            return Err(invalid(format!(
                "{path}: placeholder `{{{name}}}` is not a declared field (fields: {:?})",
                declared
            )));
        }
    }
    Ok(())
}

fn check_records(split: &str, records: &[Record], declared: &BTreeSet<&str>) -> anyhow::Result<()> {
    for r in records {
        if let Some(missing) = declared.iter().find(|f| !r.fields.contains_key(**f)) {
            return Err(invalid(format!(
                "data.{split}: record {} lacks declared field `{missing}`",
                r.index
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Record>,
    pub ic: Vec<Record>,
    pub test: Vec<Record>,
}

/// A validated configuration with its data loaded.
#[derive(Debug, Clone)]
pub struct Plan {
    pub name: String,
    pub data: Splits,
    pub scenario: Option<Scenario>,
    pub retrieval: RetrievalField,
    pub label_space: Option<Vec<String>>,
    pub prompt: PromptSpec,
    pub reward: RewardConfig,
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
}

fn policy(max_attempts: Option<u32>) -> RetryPolicy {
    let mut p = RetryPolicy::default();
    if let Some(n) = max_attempts {
        p.max_attempts = n.max(1);
    }
    p
}

/// Backends and the encoded in-context set, ready to run.
pub struct Session {
    pub plan: Plan,
    pub encoder: CachedEncoder<Box<dyn EncoderBackend>>,
    pub oracle: Box<dyn RewardOracle>,
    pub ic: InContextSet,
}

impl Session {
    pub fn open(plan: Plan) -> anyhow::Result<Self> {
        let encoder: Box<dyn EncoderBackend> = match &plan.encoder {
            EncoderConfig::Hash { dim, seed } => Box::new(hash_test_encoder(*dim, *seed)?),
            EncoderConfig::Remote {
                url,
                dim,
                max_attempts,
            } => {
                let url = resolve_url(url.as_deref(), EMBED_URL_ENV)
                    .map_err(|e| invalid(format!("encoder.url: {e}")))?;
                let enc = RemoteEncoder::new(url, policy(*max_attempts))?;
                Box::new(match dim {
                    Some(d) => enc.with_expected_dim(*d),
                    None => enc,
                })
            }
            EncoderConfig::Planted => {
                let sc = plan.scenario.as_ref().expect("validated");
                Box::new(sc.generate()?.encoder())
            }
        };
        let verbalizer = plan.prompt.template.answer_choices().cloned();
        let oracle: Box<dyn RewardOracle> = match &plan.lm {
            LmConfig::Hash { seed } => Box::new(LmOracle::new(
                HashLm::new(*seed),
                plan.reward.clone(),
                plan.label_space.clone(),
                verbalizer,
            )?),
            LmConfig::Remote { url, max_attempts } => {
                let url = resolve_url(url.as_deref(), LM_URL_ENV)
                    .map_err(|e| invalid(format!("lm.url: {e}")))?;
                Box::new(LmOracle::new(
                    RemoteLm::new(url, policy(*max_attempts))?,
                    plan.reward.clone(),
                    plan.label_space.clone(),
                    verbalizer,
                )?)
            }
            LmConfig::Synthetic => {
                let sc = plan.scenario.as_ref().expect("validated");
                Box::new(SyntheticOracle::new(sc.landscape.clone())?)
            }
        };
        let encoder = CachedEncoder::new(encoder);
        info!(
            "encoding {} in-context examples with {}",
            plan.data.ic.len(),
            encoder.id()
        );
        let ic = InContextSet::from_records(
            plan.data.ic.clone(),
            plan.retrieval.clone(),
            plan.label_space.clone(),
            &encoder,
        )?;
        Ok(Session {
            plan,
            encoder,
            oracle,
            ic,
        })
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            encoder: &self.encoder,
            ic: &self.ic,
            prompt: &self.plan.prompt,
            oracle: self.oracle.as_ref(),
        }
    }
}
