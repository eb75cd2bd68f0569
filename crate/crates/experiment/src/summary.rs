//! Per-run results and their aggregation across seeds.

use cvt_core::evaluation::{Protocol, ProtocolResults};
use cvt_core::trainer::Method;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Everything one (method, seed) run produced, with its resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub parameters: usize,
    pub steps: usize,
    pub examples_seen: usize,
    pub results: Vec<ProtocolResults>,
    /// Set when training stopped early; `results` then cover completed tasks.
    pub aborted: Option<String>,
    pub config: ExperimentConfig,
}

/// Mean and population standard deviation (`None` for a single value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn from_values(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt());
        Some(Self { mean, std, values })
    }

    /// `mean ± std` with two decimals.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.2} ± {:.2}", self.mean, s),
            None => format!("{:.2}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryStat {
    pub task: usize,
    #[serde(rename = "A_i")]
    pub accuracy: Stat,
    #[serde(rename = "F_i")]
    pub forgetting: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub protocol: Protocol,
    pub overall_accuracy: Stat,
    pub forgetting: Option<Stat>,
    pub per_boundary: Vec<BoundaryStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub parameters: usize,
    pub seeds: Vec<u64>,
    pub protocols: Vec<ProtocolSummary>,
}

impl MethodSummary {
    pub fn protocol(&self, p: Protocol) -> Option<&ProtocolSummary> {
        self.protocols.iter().find(|s| s.protocol == p)
    }

    /// Aggregates complete runs of one method.
    pub fn from_runs(runs: &[RunResult]) -> Option<Self> {
        let first = runs.first()?;
        let protocols = first
            .results
            .iter()
            .filter_map(|r| {
                let per_run: Vec<&ProtocolResults> = runs
                    .iter()
                    .filter_map(|run| run.results.iter().find(|x| x.protocol == r.protocol))
                    .collect();
                let tasks = per_run.iter().map(|x| x.per_boundary.len()).min()?;
                let per_boundary = (0..tasks)
                    .map(|i| BoundaryStat {
                        task: i + 1,
                        accuracy: Stat::from_values(per_run.iter().map(|x| x.per_boundary[i].accuracy).collect())
                            .expect("non-empty"),
                        forgetting: Stat::from_values(
                            per_run.iter().filter_map(|x| x.per_boundary[i].forgetting).collect(),
                        ),
                    })
                    .collect();
                Some(ProtocolSummary {
                    protocol: r.protocol,
                    overall_accuracy: Stat::from_values(per_run.iter().map(|x| x.overall_accuracy).collect())?,
                    forgetting: Stat::from_values(per_run.iter().filter_map(|x| x.forgetting).collect()),
                    per_boundary,
                })
            })
            .collect();
        Some(Self {
            method: first.method,
            parameters: first.parameters,
            seeds: runs.iter().map(|r| r.seed).collect(),
            protocols,
        })
    }
}

/// Aggregated results of a whole experiment; the report is built from this
/// alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub methods: Vec<MethodSummary>,
}

impl Summary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_over_seeds() {
        let s = Stat::from_values(vec![24.0, 25.0, 23.0]).unwrap();
        assert_eq!(s.mean, 24.0);
        assert!((s.std.unwrap() - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.display(), "24.00 ± 0.82");
        let one = Stat::from_values(vec![5.0]).unwrap();
        assert_eq!(one.std, None);
        assert!(Stat::from_values(vec![]).is_none());
    }
}
