//! Aggregation of evaluation runs into a comparison table.

use serde::{Deserialize, Serialize};

use crate::engine::{EvalReport, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: String,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Sorted by descending mean reward.
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<EvalReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricsTable {
    /// Mean and sample standard deviation per method across runs.
    pub fn from_runs(runs: Vec<EvalReport>) -> Self {
        let mut methods: Vec<Method> = Vec::new();
        for r in &runs {
            for res in &r.results {
                if !methods.contains(&res.method) {
                    methods.push(res.method);
                }
            }
        }
        let mut rows: Vec<SummaryRow> = methods
            .into_iter()
            .map(|method| {
                let hits: Vec<_> = runs.iter().filter_map(|r| r.get(method)).collect();
                let metric: Vec<f64> = hits.iter().map(|h| h.metric_value).collect();
                let reward: Vec<f64> = hits.iter().map(|h| h.mean_reward).collect();
                let (metric_mean, metric_std) = mean_std(&metric);
                let (reward_mean, reward_std) = mean_std(&reward);
                SummaryRow {
                    method,
                    metric: hits.first().map(|h| h.metric.clone()).unwrap_or_default(),
                    metric_mean,
                    metric_std,
                    reward_mean,
                    reward_std,
                    seeds: hits.len(),
                }
            })
            .collect();
        rows.sort_by(|a, b| b.reward_mean.total_cmp(&a.reward_mean));
        MetricsTable { rows, runs }
    }

    /// Position of `method` in the reward ranking (0 = best).
    pub fn rank_of(&self, method: Method) -> Option<usize> {
        self.rows.iter().position(|r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let metric = self.rows.first().map_or("metric", |r| r.metric.as_str());
        let mut out = format!(
            "{:<12} {:>22} {:>22} {:>6}\n",
            "method", metric, "mean_reward", "seeds"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>22} {:>22} {:>6}\n",
                r.method.name(),
                format!("{:.4} ({:.4})", r.metric_mean, r.metric_std),
                format!("{:.4} ({:.4})", r.reward_mean, r.reward_std),
                r.seeds
            ));
        }
        out
    }

    /// One raw row per (seed, method), then one `mean` row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,method,metric,metric_value,mean_reward\n");
        for run in &self.runs {
            for r in &run.results {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    run.seed,
                    r.method.name(),
                    r.metric,
                    r.metric_value,
                    r.mean_reward
                ));
            }
        }
        out.push_str("\nmethod,metric,metric_mean,metric_std,reward_mean,reward_std,seeds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method.name(),
                r.metric,
                r.metric_mean,
                r.metric_std,
                r.reward_mean,
                r.reward_std,
                r.seeds
            ));
        }
        out
    }
}
