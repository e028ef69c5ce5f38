//! Evaluation metrics: pass@k, correctness@k, similarity@k, and the shared
//! normalized edit-similarity function, plus per-strategy report
//! aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sandbox::{ExecutionOutcome, Verdict};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("k must be >= 1")]
    KZero,
    #[error("k={k} exceeds available samples n={n} (the estimator is undefined)")]
    KExceedsN { k: usize, n: usize },
    #[error("correct count c={c} exceeds n={n}")]
    CExceedsN { c: usize, n: usize },
    #[error("problem {task_id}: {message}")]
    BadProblem { task_id: String, message: String },
}

/// Levenshtein distance over Unicode scalar values, two-row dynamic
/// programming.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }

    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ca != cb);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)`, on characters; 1 when both
/// strings are empty. Symmetric, and 1 exactly when `a == b`.
pub fn normalized_edit_similarity(a: &str, b: &str) -> f64 {
    let len_a = a.chars().count();
    let len_b = b.chars().count();
    let longest = len_a.max(len_b);
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// Unbiased pass@k estimator for a problem with `n` samples of which `c`
/// passed: `1 - C(n-c, k) / C(n, k)`.
///
/// Computed with the numerically stable product
/// `1 - prod_{i=n-c+1..=n} (1 - k/i)`, with the convention that the result
/// is 1 when `n - c < k` (every k-subset must contain a correct sample).
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::KZero);
    }
    if k > n {
        return Err(MetricError::KExceedsN { k, n });
    }
    if c > n {
        return Err(MetricError::CExceedsN { c, n });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0f64;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// Mean similarity@k outcome for one problem, plus whether the working set
/// within the first k samples was empty (the declared 0-contribution case).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityAtK {
    pub value: f64,
    pub empty_working_set: bool,
}

/// Per-problem evaluation record: the `n` sandbox outcomes, the count `c`
/// of passing samples, their extracted code (the working set), and the
/// dataset's golden solution.
#[derive(Debug, Clone)]
pub struct ProblemResult {
    pub query_task_id: String,
    pub n: usize,
    pub outcomes: Vec<ExecutionOutcome>,
    pub c: usize,
    /// `(sample_index, extracted_code)` of PASS samples, ascending index.
    pub working_codes: Vec<(usize, String)>,
    pub golden_code: String,
}

impl ProblemResult {
    /// Build from sandbox outcomes and the per-sample extracted code,
    /// both covering sample indices `0..n`.
    pub fn new(
        query_task_id: &str,
        mut outcomes: Vec<ExecutionOutcome>,
        codes: &[String],
        golden_code: &str,
    ) -> Result<Self, MetricError> {
        outcomes.sort_by_key(|o| o.sample_index);
        let n = outcomes.len();
        if codes.len() != n {
            return Err(MetricError::BadProblem {
                task_id: query_task_id.to_string(),
                message: format!("{} codes for {} outcomes", codes.len(), n),
            });
        }
        for (i, outcome) in outcomes.iter().enumerate() {
            if outcome.sample_index != i {
                return Err(MetricError::BadProblem {
                    task_id: query_task_id.to_string(),
                    message: format!("sample indices not contiguous at {i}"),
                });
            }
        }
        let working_codes: Vec<(usize, String)> = outcomes
            .iter()
            .filter(|o| o.verdict == Verdict::Pass)
            .map(|o| (o.sample_index, codes[o.sample_index].clone()))
            .collect();
        let c = working_codes.len();
        Ok(ProblemResult {
            query_task_id: query_task_id.to_string(),
            n,
            outcomes,
            c,
            working_codes,
            golden_code: golden_code.to_string(),
        })
    }

    /// `c_k / k` where `c_k` counts PASS verdicts among the first `k`
    /// samples in sample-index order.
    pub fn correctness_at_k(&self, k: usize) -> Result<f64, MetricError> {
        if k == 0 {
            return Err(MetricError::KZero);
        }
        if k > self.n {
            return Err(MetricError::KExceedsN { k, n: self.n });
        }
        let c_k = self
            .outcomes
            .iter()
            .take(k)
            .filter(|o| o.verdict == Verdict::Pass)
            .count();
        Ok(c_k as f64 / k as f64)
    }

    /// Mean normalized edit similarity between the working codes among the
    /// first `k` samples and the golden solution; 0 when that set is empty.
    pub fn similarity_at_k(&self, k: usize) -> Result<SimilarityAtK, MetricError> {
        if k == 0 {
            return Err(MetricError::KZero);
        }
        if k > self.n {
            return Err(MetricError::KExceedsN { k, n: self.n });
        }
        let working: Vec<&str> = self
            .working_codes
            .iter()
            .filter(|(idx, _)| *idx < k)
            .map(|(_, code)| code.as_str())
            .collect();
        if working.is_empty() {
            return Ok(SimilarityAtK {
                value: 0.0,
                empty_working_set: true,
            });
        }
        let total: f64 = working
            .iter()
            .map(|code| normalized_edit_similarity(code, &self.golden_code))
            .sum();
        Ok(SimilarityAtK {
            value: total / working.len() as f64,
            empty_working_set: false,
        })
    }

    /// pass@k for this problem alone.
    pub fn pass_at_k(&self, k: usize) -> Result<f64, MetricError> {
        pass_at_k(self.n, self.c, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Correctness,
    Similarity,
    Pass,
}

impl MetricKind {
    fn label(&self) -> &'static str {
        match self {
            MetricKind::Correctness => "correctness",
            MetricKind::Similarity => "similarity",
            MetricKind::Pass => "pass",
        }
    }
}

/// One requested (metric, k) cell of the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricRequest {
    pub kind: MetricKind,
    pub k: usize,
}

impl MetricRequest {
    pub fn name(&self) -> String {
        format!("{}@{}", self.kind.label(), self.k)
    }
}

/// Per-dataset, per-strategy aggregation of the requested metrics.
///
/// Metric values are raw fractions in [0, 1]; percentages are a rendering
/// concern only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub strategy: String,
    pub metrics: BTreeMap<String, f64>,
    pub problems: usize,
    /// Problems whose working set was empty across all n samples.
    #[serde(rename = "empty_S")]
    pub empty_s: usize,
    pub config_digest: String,
}

/// Average each requested metric over all problems (unweighted arithmetic
/// mean). Every problem must have generated at least `k` samples for each
/// requested k.
pub fn aggregate_report(
    dataset: &str,
    strategy: &str,
    config_digest: &str,
    results: &[ProblemResult],
    requests: &[MetricRequest],
) -> Result<MetricReport, MetricError> {
    let mut metrics = BTreeMap::new();
    for request in requests {
        for result in results {
            if result.n < request.k {
                return Err(MetricError::BadProblem {
                    task_id: result.query_task_id.clone(),
                    message: format!(
                        "has n={} samples but {} was requested",
                        result.n,
                        request.name()
                    ),
                });
            }
        }
        let mut total = 0.0;
        for result in results {
            total += match request.kind {
                MetricKind::Pass => result.pass_at_k(request.k)?,
                MetricKind::Correctness => result.correctness_at_k(request.k)?,
                MetricKind::Similarity => result.similarity_at_k(request.k)?.value,
            };
        }
        let mean = if results.is_empty() {
            0.0
        } else {
            total / results.len() as f64
        };
        metrics.insert(request.name(), mean);
    }
    Ok(MetricReport {
        dataset: dataset.to_string(),
        strategy: strategy.to_string(),
        metrics,
        problems: results.len(),
        empty_s: results.iter().filter(|r| r.c == 0).count(),
        config_digest: config_digest.to_string(),
    })
}

/// Strategy column order for rendered tables.
const STRATEGY_COLUMNS: [&str; 3] = ["semantic", "latent", "random"];

/// Render reports for one dataset as a text table: one row per (metric, k),
/// strategy columns ordered semantic, latent, random.
pub fn render_comparison_table(dataset: &str, reports: &[&MetricReport]) -> String {
    let mut columns: Vec<&MetricReport> = Vec::new();
    for name in STRATEGY_COLUMNS {
        if let Some(report) = reports.iter().find(|r| r.strategy == name) {
            columns.push(report);
        }
    }
    for report in reports {
        if !STRATEGY_COLUMNS.contains(&report.strategy.as_str()) {
            columns.push(report);
        }
    }

    // Row order groups correctness, then similarity, then pass, k ascending.
    let mut rows: Vec<(MetricKind, usize)> = Vec::new();
    for report in &columns {
        for name in report.metrics.keys() {
            if let Some(row) = parse_metric_name(name) {
                if !rows.contains(&row) {
                    rows.push(row);
                }
            }
        }
    }
    rows.sort();

    let mut out = String::new();
    out.push_str(&format!("Evaluation Results on {dataset}\n"));
    out.push_str(&format!("{:<18}", "Parameter"));
    for col in &columns {
        out.push_str(&format!("{:>12}", col.strategy));
    }
    out.push('\n');
    for (kind, k) in rows {
        let name = MetricRequest { kind, k }.name();
        out.push_str(&format!("{name:<18}"));
        for col in &columns {
            match col.metrics.get(&name) {
                Some(v) => out.push_str(&format!("{:>11.2}%", v * 100.0)),
                None => out.push_str(&format!("{:>12}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

fn parse_metric_name(name: &str) -> Option<(MetricKind, usize)> {
    let (kind, k) = name.split_once('@')?;
    let kind = match kind {
        "correctness" => MetricKind::Correctness,
        "similarity" => MetricKind::Similarity,
        "pass" => MetricKind::Pass,
        _ => return None,
    };
    Some((kind, k.parse().ok()?))
}
