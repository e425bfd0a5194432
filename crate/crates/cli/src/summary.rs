//! Aggregate statistics over result rows.

use serde::{Deserialize, Serialize};
use xlmimo_core::tasks::Method;

use crate::output::{ResultRow, SCHEMA_VERSION};

/// Boxplot numbers; whiskers are the most extreme samples within 1.5 IQR of the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

impl BoxStats {
    pub fn from_samples(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q1 = quantile(&v, 0.25);
        let q3 = quantile(&v, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let nan = f64::NAN;
        Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.first().copied().unwrap_or(nan),
            q1,
            median: quantile(&v, 0.5),
            q3,
            max: v.last().copied().unwrap_or(nan),
            whisker_low: v.iter().copied().find(|&x| x >= lo_fence).unwrap_or(nan),
            whisker_high: v
                .iter()
                .rev()
                .copied()
                .find(|&x| x <= hi_fence)
                .unwrap_or(nan),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMean {
    pub seed: u64,
    pub drops: usize,
    pub mean_sum_se: f64,
    pub mean_ee: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Pooled over all drops of all seeds.
    pub sum_se: BoxStats,
    pub ee: BoxStats,
    pub per_seed: Vec<SeedMean>,
    pub median_seed_sum_se: f64,
    pub median_seed_ee: f64,
    /// `median_seed_ee / NoSelection's median_seed_ee - 1`, when NoSelection ran.
    pub ee_uplift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config_hash: String,
    pub methods: Vec<MethodSummary>,
    /// Echo of the experiment configuration, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Summary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

fn first_seen<T: PartialEq + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

pub fn summarize(
    config_hash: &str,
    rows: &[ResultRow],
    config: Option<serde_json::Value>,
) -> Summary {
    let mut methods = Vec::new();
    for method in first_seen(rows.iter().map(|r| r.method)) {
        let mine: Vec<&ResultRow> = rows.iter().filter(|r| r.method == method).collect();
        let se: Vec<f64> = mine.iter().map(|r| r.sum_se).collect();
        let ee: Vec<f64> = mine.iter().map(|r| r.ee).collect();
        let per_seed: Vec<SeedMean> = first_seen(mine.iter().map(|r| r.seed))
            .into_iter()
            .map(|seed| {
                let s: Vec<&&ResultRow> = mine.iter().filter(|r| r.seed == seed).collect();
                let n = s.len() as f64;
                SeedMean {
                    seed,
                    drops: s.len(),
                    mean_sum_se: s.iter().map(|r| r.sum_se).sum::<f64>() / n,
                    mean_ee: s.iter().map(|r| r.ee).sum::<f64>() / n,
                }
            })
            .collect();
        methods.push(MethodSummary {
            method,
            sum_se: BoxStats::from_samples(&se),
            ee: BoxStats::from_samples(&ee),
            median_seed_sum_se: median(&per_seed.iter().map(|s| s.mean_sum_se).collect::<Vec<_>>()),
            median_seed_ee: median(&per_seed.iter().map(|s| s.mean_ee).collect::<Vec<_>>()),
            per_seed,
            ee_uplift: None,
        });
    }
    let base = methods
        .iter()
        .find(|m| m.method == Method::NoSelection)
        .map(|m| m.median_seed_ee);
    if let Some(b) = base {
        for m in &mut methods {
            m.ee_uplift = Some(m.median_seed_ee / b - 1.0);
        }
    }
    Summary {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        methods,
        config,
    }
}

/// Human-readable lines printed after an evaluation.
pub fn describe(summary: &Summary) -> Vec<String> {
    summary
        .methods
        .iter()
        .map(|m| {
            let uplift = m
                .ee_uplift
                .map(|u| format!(", EE uplift vs NoSelection {:+.2}%", 100.0 * u))
                .unwrap_or_default();
            format!(
                "{:<13} median sum SE {:.4} bit/s/Hz, median EE {:.4e} bit/J over {} seed(s){}",
                m.method.name(),
                m.median_seed_sum_se,
                m.median_seed_ee,
                m.per_seed.len(),
                uplift
            )
        })
        .collect()
}
