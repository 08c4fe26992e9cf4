use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use poem_core::engine::{train_with_hook, ExplorationMode};
use poem_core::memory::StateRecord;
use poem_core::reward::{Outcome, Scoring};
use poem_core::simenv::{Scenario, SyntheticOracle};
use poem_core::{
    infer, train, Action, Embedding, EncoderBackend, EpisodicMemory, InContextSet, Pipeline,
    PoemError, PromptSpec, Record, RetrievalField, RewardOracle, Template, TrainConfig,
};

fn scenario() -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/descending.json");
    Scenario::load(&path).unwrap()
}

struct Fixture {
    scenario: Scenario,
    train: Vec<Record>,
    encoder: Box<dyn EncoderBackend>,
    ic: InContextSet,
    prompt: PromptSpec,
    oracle: SyntheticOracle,
}

impl Fixture {
    fn new(scenario: Scenario) -> Self {
        let task = scenario.generate().unwrap();
        let encoder: Box<dyn EncoderBackend> = Box::new(task.encoder());
        let ic = InContextSet::from_records(
            task.ic.clone(),
            RetrievalField::default(),
            task.label_space.clone(),
            &encoder,
        )
        .unwrap();
        Fixture {
            oracle: SyntheticOracle::new(scenario.landscape.clone()).unwrap(),
            scenario,
            train: task.train,
            encoder,
            ic,
            prompt: PromptSpec::new(Template::new("{text} => {label}").unwrap()),
        }
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            encoder: &self.encoder,
            ic: &self.ic,
            prompt: &self.prompt,
            oracle: &self.oracle,
        }
    }
}

#[test]
fn training_is_deterministic() {
    let fx = Fixture::new(scenario());
    let cfg = TrainConfig {
        iterations: 20,
        ..fx.scenario.train.clone().unwrap()
    };
    let run = || {
        let mut mem = EpisodicMemory::new(fx.train.len(), cfg.m).unwrap();
        let report = train(&cfg, &fx.train, &fx.pipeline(), &mut mem)
            .unwrap()
            .without_timing();
        (mem.to_json(), serde_json::to_string(&report).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn exhaustive_four_states_fill_everything() {
    let mut sc = scenario();
    sc.task.train_size = 4;
    sc.landscape.position_weights = vec![3.0, 2.0, 1.0];
    let fx = Fixture::new(sc);
    let cfg = TrainConfig {
        m: 3,
        exploration_mode: ExplorationMode::Exhaustive,
        ..TrainConfig::default()
    };
    let mut mem = EpisodicMemory::new(4, 3).unwrap();
    let report = train(&cfg, &fx.train, &fx.pipeline(), &mut mem).unwrap();
    assert_eq!(report.fill_ratio, 1.0);
    assert_eq!(report.filled_pairs, 24);
    assert!(report.exploration.contains("harness extension"));
}

#[test]
fn fill_ratio_is_monotone_and_memory_bounded() {
    let fx = Fixture::new(scenario());
    let cfg = fx.scenario.train.clone().unwrap();
    let mut mem = EpisodicMemory::new(fx.train.len(), cfg.m).unwrap();
    let report = train(&cfg, &fx.train, &fx.pipeline(), &mut mem).unwrap();
    let fills: Vec<f64> = report.iterations.iter().map(|i| i.fill_ratio).collect();
    assert!(fills.windows(2).all(|w| w[0] <= w[1]));
    assert!((0.0..=1.0).contains(&report.fill_ratio));

    let mut small = EpisodicMemory::new(3, cfg.m).unwrap();
    let mut sizes = Vec::new();
    train_with_hook(&cfg, &fx.train, &fx.pipeline(), &mut small, &mut |_, m| {
        sizes.push(m.len());
        Ok(())
    })
    .unwrap();
    assert!(sizes.iter().all(|&n| n <= 3));
}

fn unit(v: Vec<f64>) -> Embedding {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.into_iter().map(|x| x / n).collect()).unwrap()
}

/// Records the prompt order of example indices for every scored job.
struct Recorder {
    seen: Mutex<Vec<Vec<u64>>>,
}

impl RewardOracle for Recorder {
    fn id(&self) -> &str {
        "recorder"
    }

    fn metric(&self) -> &str {
        "none"
    }

    fn evaluate(&self, input: &Scoring<'_>) -> poem_core::Result<Outcome> {
        self.seen
            .lock()
            .unwrap()
            .push(input.ordered.iter().map(|e| e.index).collect());
        Ok(Outcome {
            reward: 0.0,
            correct: false,
        })
    }
}

struct Table(BTreeMap<String, Embedding>);

impl EncoderBackend for Table {
    fn id(&self) -> &str {
        "table"
    }

    fn encode(&self, texts: &[&str]) -> poem_core::Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| {
                self.0.get(*t).cloned().ok_or_else(|| PoemError::Load {
                    context: t.to_string(),
                    detail: "unknown".into(),
                })
            })
            .collect()
    }
}

fn text_record(index: u64, text: &str) -> Record {
    Record::new(index, [("text".to_string(), text.to_string())])
}

#[test]
fn full_exploration_is_uniform_over_actions() {
    // every query sees the same similarity order: ic-0 closest, then ic-1, ic-2
    let mut table = BTreeMap::new();
    for (i, angle) in [0.1f64, 0.5, 0.9].iter().enumerate() {
        table.insert(format!("ic-{i}"), unit(vec![angle.cos(), angle.sin()]));
    }
    let mut train_set = Vec::new();
    for i in 0..16 {
        let name = format!("q-{i}");
        table.insert(name.clone(), unit(vec![1.0, -0.01 * i as f64]));
        train_set.push(text_record(i, &name));
    }
    let ic_records: Vec<Record> = (0..3).map(|i| text_record(i, &format!("ic-{i}"))).collect();
    let encoder = Table(table);
    let ic =
        InContextSet::from_records(ic_records, RetrievalField::default(), None, &encoder).unwrap();
    let prompt = PromptSpec::new(Template::new("{text}").unwrap());
    let oracle = Recorder {
        seen: Mutex::new(Vec::new()),
    };
    let pipeline = Pipeline {
        encoder: &encoder,
        ic: &ic,
        prompt: &prompt,
        oracle: &oracle,
    };
    let cfg = TrainConfig {
        iterations: 625,
        minibatch_size: 16,
        epsilon_initial: 1.0,
        epsilon_final: 1.0,
        m: 3,
        seed: 42,
        ..TrainConfig::default()
    };
    let mut mem = EpisodicMemory::new(16, 3).unwrap();
    train(&cfg, &train_set, &pipeline, &mut mem).unwrap();
    let seen = oracle.seen.into_inner().unwrap();
    assert_eq!(seen.len(), 10_000);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for order in &seen {
        let ranks: Vec<usize> = order.iter().map(|&i| i as usize + 1).collect();
        *counts.entry(Action::new(ranks).unwrap().key()).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let expected = 10_000.0 / 6.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // chi-square, 5 degrees of freedom, upper 0.1% point
    assert!(chi2 < 20.515, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn equidistant_query_reads_the_mean() {
    let mut mem = EpisodicMemory::new(4, 2).unwrap();
    let a = Action::identity(2);
    mem.write(&StateRecord::new("s1", unit(vec![1.0, 0.0])), &a, 1.0)
        .unwrap();
    mem.write(&StateRecord::new("s2", unit(vec![0.0, 1.0])), &a, 3.0)
        .unwrap();
    let q = StateRecord::new("q", unit(vec![1.0, 1.0]));
    assert!((mem.read(&q, &a, 2).unwrap().unwrap() - 2.0).abs() < 1e-12);
    let best = mem.best_action(&q, 2).unwrap();
    assert_eq!(best.action, a);
    assert!((best.estimate.unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn empty_memory_infers_identity_in_descending_order() {
    let fx = Fixture::new(scenario());
    let mem = EpisodicMemory::new(4, 4).unwrap();
    let inf = infer(&mem, &fx.train[0], &fx.pipeline(), 10).unwrap();
    assert!(inf.best.fallback);
    assert_eq!(inf.action(), &Action::identity(4));
    let order: Vec<u64> = inf.ordered.iter().map(|e| e.index).collect();
    let canonical: Vec<u64> = inf.selected.iter().map(|e| e.index).collect();
    assert_eq!(order, canonical);
    assert!(inf.prompt.ends_with("=>"));
}

#[test]
fn novel_far_query_still_gets_a_valid_action() {
    let fx = Fixture::new(scenario());
    let cfg = TrainConfig {
        iterations: 10,
        ..fx.scenario.train.clone().unwrap()
    };
    let mut mem = EpisodicMemory::new(fx.train.len(), 4).unwrap();
    train(&cfg, &fx.train, &fx.pipeline(), &mut mem).unwrap();
    // unknown text goes through the hash fallback encoder
    let inf = infer(
        &mem,
        &text_record(99, "something unrelated"),
        &fx.pipeline(),
        10,
    )
    .unwrap();
    assert_eq!(inf.action().m(), 4);
    assert!(inf.best.estimate.is_some_and(f64::is_finite));
}
