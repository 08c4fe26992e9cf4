use std::fs;
use std::path::Path;

use anyhow::Context;
use log::{debug, info};
use poem_core::action::factorial;
use poem_core::dataset::read_jsonl;
use poem_core::engine::{infer_prepared, train_with_hook, EvalReport};
use poem_core::memory::SNAPSHOT_VERSION;
use poem_core::metrics::MetricsTable;
use poem_core::{evaluate, EpisodicMemory, Record, RetrievalField, RunReport};
use serde::Serialize;

use crate::config::{invalid, Session};

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Loads a snapshot; a missing file is a usage error rather than a runtime one.
pub fn load_memory(path: &Path) -> anyhow::Result<EpisodicMemory> {
    if !path.exists() {
        return Err(invalid(format!(
            "--memory: file not found: {}",
            path.display()
        )));
    }
    Ok(EpisodicMemory::load(path)?)
}

/// Trains a fresh memory sized per the plan's capacity.
pub fn run_training(
    session: &Session,
    seed: u64,
    snapshot_dir: Option<&Path>,
) -> anyhow::Result<(EpisodicMemory, RunReport)> {
    let mut cfg = session.plan.train.clone();
    cfg.seed = seed;
    let capacity = cfg.capacity.unwrap_or(session.plan.data.train.len()).max(1);
    let mut memory = EpisodicMemory::new(capacity, cfg.m)?;
    if let Some(dir) = snapshot_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut hook = |t: usize, mem: &EpisodicMemory| -> poem_core::Result<()> {
        debug!("iteration {t}: {} filled pairs", mem.filled_pairs());
        match snapshot_dir {
            Some(dir) => mem.save(&dir.join(format!("iter-{t:04}.json"))),
            None => Ok(()),
        }
    };
    let report = train_with_hook(
        &cfg,
        &session.plan.data.train,
        &session.pipeline(),
        &mut memory,
        &mut hook,
    )?;
    Ok((memory, report))
}

pub struct TrainArgs<'a> {
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub json: bool,
    pub timing: bool,
    pub snapshot_dir: Option<&'a Path>,
}

pub fn train(session: &Session, args: TrainArgs<'_>) -> anyhow::Result<()> {
    let seed = args.seed.unwrap_or(session.plan.train.seed);
    let (memory, report) = run_training(session, seed, args.snapshot_dir)?;
    memory.save(args.out)?;
    info!("memory written to {}", args.out.display());
    let report = if args.timing {
        report
    } else {
        report.without_timing()
    };
    if args.json {
        return print_json(&report);
    }
    println!(
        "trained {} state(s) x {} action(s) over {} iteration(s), seed {}",
        report.states,
        report.actions_per_state,
        report.iterations.len(),
        report.seed
    );
    println!("exploration: {}", report.exploration);
    println!(
        "fill ratio: {:.4} ({} pairs)",
        report.fill_ratio, report.filled_pairs
    );
    if let Some(last) = report.iterations.last() {
        println!("final iteration mean reward: {:.6}", last.mean_reward);
    }
    if let Some(ms) = report.wall_clock_ms {
        println!("wall clock: {ms:.1} ms");
    }
    println!("memory: {}", args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct OrderedQuery {
    index: u64,
    action: String,
    estimate: Option<f64>,
    fallback: bool,
    /// In-context indices in prompt order.
    examples: Vec<u64>,
    prompt: String,
}

pub enum QuerySource<'a> {
    Text(&'a str),
    File(&'a Path),
}

fn text_query(retrieval: &RetrievalField, text: &str) -> anyhow::Result<Record> {
    let names = retrieval.names();
    let [name] = names.as_slice() else {
        return Err(invalid(
            "--query needs a single retrieval field; use --file for multi-field records",
        ));
    };
    Ok(Record::new(0, [(name.to_string(), text.to_string())]))
}

pub fn order(
    session: &Session,
    memory: &EpisodicMemory,
    source: QuerySource<'_>,
    k: Option<usize>,
    json: bool,
) -> anyhow::Result<()> {
    let queries = match source {
        QuerySource::Text(t) => vec![text_query(&session.plan.retrieval, t)?],
        QuerySource::File(p) => {
            if !p.exists() {
                return Err(invalid(format!("--file: file not found: {}", p.display())));
            }
            read_jsonl(p).map_err(|e| invalid(format!("--file: {e}")))?
        }
    };
    if queries.is_empty() {
        return Err(invalid("no queries to order"));
    }
    let k = k.unwrap_or(session.plan.train.k);
    if k == 0 {
        return Err(invalid("--k must be >= 1"));
    }
    let pipeline = session.pipeline();
    let prepared = pipeline.prepare(&queries, memory.m())?;
    let mut out = Vec::with_capacity(prepared.len());
    for q in &prepared {
        let inf = infer_prepared(memory, q, &pipeline, k)?;
        out.push(OrderedQuery {
            index: q.record.index,
            action: inf.action().key(),
            estimate: inf.best.estimate,
            fallback: inf.best.fallback,
            examples: inf.ordered.iter().map(|e| e.index).collect(),
            prompt: inf.prompt,
        });
    }
    if json {
        return print_json(&serde_json::json!({ "queries": out }));
    }
    for (i, q) in out.iter().enumerate() {
        if i > 0 {
            println!();
        }
        let estimate = q
            .estimate
            .map_or("undefined".to_string(), |e| format!("{e:.6}"));
        println!(
            "query {}: action {} (estimate {estimate}{})",
            q.index,
            q.action,
            if q.fallback {
                ", identity fallback"
            } else {
                ""
            }
        );
        println!("examples: {:?}", q.examples);
        println!("---\n{}\n---", q.prompt);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    training: Vec<RunReport>,
    table: MetricsTable,
}

pub struct EvalArgs<'a> {
    pub memory: Option<&'a Path>,
    pub seed: Option<u64>,
    pub seeds: usize,
    pub json: bool,
    pub timing: bool,
    pub out: Option<&'a Path>,
}

/// Evaluates over `seeds` consecutive seeds. Without a memory file each
/// seed trains its own memory first.
pub fn eval(session: &Session, args: EvalArgs<'_>) -> anyhow::Result<()> {
    if session.plan.data.test.is_empty() {
        return Err(invalid("data.test: eval needs a non-empty test split"));
    }
    if args.seeds == 0 {
        return Err(invalid("--seeds must be >= 1"));
    }
    let loaded = args.memory.map(load_memory).transpose()?;
    let first = args.seed.unwrap_or(session.plan.train.seed);
    let pipeline = session.pipeline();
    let mut training = Vec::new();
    let mut runs: Vec<EvalReport> = Vec::with_capacity(args.seeds);
    for seed in (first..).take(args.seeds) {
        let trained;
        let memory = match &loaded {
            Some(m) => m,
            None => {
                let (m, report) = run_training(session, seed, None)?;
                training.push(if args.timing {
                    report
                } else {
                    report.without_timing()
                });
                trained = m;
                &trained
            }
        };
        info!("evaluating seed {seed}");
        runs.push(evaluate(
            memory,
            &session.plan.data.test,
            &pipeline,
            session.plan.train.k,
            seed,
            &session.plan.methods,
            session.plan.train.max_in_flight,
        )?);
    }
    let table = MetricsTable::from_runs(runs);
    if let Some(out) = args.out {
        write_file(out, &table.to_csv())?;
    }
    if args.json {
        return print_json(&EvalOutput { training, table });
    }
    if !session.plan.name.is_empty() {
        println!("{}", session.plan.name);
    }
    print!("{}", table.to_text());
    Ok(())
}

#[derive(Debug, Serialize)]
struct StateSummary {
    state_id: String,
    text: String,
    filled: usize,
    best_action: Option<String>,
    best_reward: Option<f64>,
    last_touch: u64,
}

#[derive(Debug, Serialize)]
struct MemorySummary {
    version: u64,
    m: usize,
    capacity: usize,
    dim: Option<usize>,
    states: usize,
    filled_pairs: usize,
    fill_ratio: f64,
    /// Most recently used first.
    entries: Vec<StateSummary>,
}

pub fn inspect_memory(path: &Path, json: bool, top: Option<usize>) -> anyhow::Result<()> {
    let memory = load_memory(path)?;
    let per_state = factorial(memory.m()) as usize;
    let fill_ratio = if memory.is_empty() {
        0.0
    } else {
        memory.filled_pairs() as f64 / (memory.len() * per_state) as f64
    };
    let entries: Vec<StateSummary> = memory
        .states_by_recency()
        .into_iter()
        .take(top.unwrap_or(usize::MAX))
        .map(|v| {
            // first maximum in lexicographic order
            let best = v
                .rewards()
                .fold(None, |acc: Option<(_, f64)>, (a, r)| match acc {
                    Some((_, br)) if br >= r => acc,
                    _ => Some((a, r)),
                });
            StateSummary {
                state_id: v.record().state_id().to_string(),
                text: v.record().source_text().to_string(),
                filled: v.filled(),
                best_action: best.as_ref().map(|(a, _)| a.key()),
                best_reward: best.map(|(_, r)| r),
                last_touch: v.last_touch(),
            }
        })
        .collect();
    let summary = MemorySummary {
        version: SNAPSHOT_VERSION,
        m: memory.m(),
        capacity: memory.capacity(),
        dim: memory.dim(),
        states: memory.len(),
        filled_pairs: memory.filled_pairs(),
        fill_ratio,
        entries,
    };
    if json {
        return print_json(&summary);
    }
    println!("memory: {}", path.display());
    println!(
        "version {}, m {}, capacity {}, dim {}",
        summary.version,
        summary.m,
        summary.capacity,
        summary.dim.map_or("-".to_string(), |d| d.to_string())
    );
    println!(
        "{} state(s), {} filled pair(s), fill ratio {:.4}",
        summary.states, summary.filled_pairs, summary.fill_ratio
    );
    if summary.entries.is_empty() {
        return Ok(());
    }
    println!();
    println!(
        "{:<34} {:>6} {:>12} {:>14}  text",
        "state_id", "filled", "best", "reward"
    );
    for e in &summary.entries {
        let text: String = e.text.chars().take(40).collect();
        println!(
            "{:<34} {:>6} {:>12} {:>14}  {}",
            e.state_id,
            e.filled,
            e.best_action.as_deref().unwrap_or("-"),
            e.best_reward.map_or("-".to_string(), |r| format!("{r:.6}")),
            text
        );
    }
    Ok(())
}
