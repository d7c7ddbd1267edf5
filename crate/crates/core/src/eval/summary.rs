use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::types::SubjectId;
use crate::error::{Error, Result};
use crate::eval::experiments::FoldResult;
use crate::eval::spec::ExperimentSpec;
use crate::model::arch::{ArchConfig, TrainHyper};

/// Size of the best and worst user slices.
pub const SLICE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub run_id: String,
    pub spec: ExperimentSpec,
    pub folds: Vec<FoldResult>,
}

impl RunResults {
    /// Wraps fold results under an id derived from everything that
    /// determines them.
    pub fn new(spec: &ExperimentSpec, dataset_hash: &str, arch: &ArchConfig, hyper: &TrainHyper, folds: Vec<FoldResult>) -> Self {
        Self {
            run_id: run_id(spec, dataset_hash, arch, hyper),
            spec: spec.clone(),
            folds,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    /// SHA-256 over every fold result except the wall time.
    pub fn result_hash(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.folds {
            let timeless = FoldResult { wall_ms: 0, ..f.clone() };
            h.update(serde_json::to_vec(&timeless).expect("fold serializes"));
        }
        hex::encode(h.finalize())
    }
}

pub fn run_id(spec: &ExperimentSpec, dataset_hash: &str, arch: &ArchConfig, hyper: &TrainHyper) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    h.update(dataset_hash.as_bytes());
    h.update(serde_json::to_vec(arch).expect("arch serializes"));
    h.update(serde_json::to_vec(hyper).expect("hyper serializes"));
    format!("{}-{}", spec.kind, &hex::encode(h.finalize())[..12])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Left-to-right sum divided by the count.
pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub target: SubjectId,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub users: Vec<SubjectId>,
    pub mean: f64,
    pub baseline_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub run_id: String,
    pub baseline_run_id: String,
    /// Ordered by target.
    pub rows: Vec<SummaryRow>,
    pub median: f64,
    pub mean: f64,
    pub baseline_median: f64,
    pub baseline_mean: f64,
    /// Users with the highest baseline accuracy.
    pub top: SliceStats,
    /// Users with the lowest baseline accuracy.
    pub flop: SliceStats,
}

/// Compares a run with a baseline run over the same folds.
pub fn summarize(results: &RunResults, baseline: &RunResults) -> Result<SummaryTable> {
    let mut runs: Vec<&FoldResult> = results.folds.iter().collect();
    let mut bases: Vec<&FoldResult> = baseline.folds.iter().collect();
    runs.sort_by_key(|f| f.target);
    bases.sort_by_key(|f| f.target);
    let ids = |fs: &[&FoldResult]| fs.iter().map(|f| f.target).collect::<Vec<_>>();
    if runs.is_empty() || ids(&runs) != ids(&bases) {
        return Err(Error::invalid(format!(
            "fold mismatch between {} and {}",
            results.run_id, baseline.run_id
        )));
    }
    let rows: Vec<SummaryRow> = runs
        .iter()
        .zip(&bases)
        .map(|(r, b)| SummaryRow {
            target: r.target,
            accuracy: r.accuracy,
            baseline_accuracy: b.accuracy,
            delta: r.accuracy - b.accuracy,
        })
        .collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let base: Vec<f64> = rows.iter().map(|r| r.baseline_accuracy).collect();

    let mut ranked: Vec<&SummaryRow> = rows.iter().collect();
    ranked.sort_by(|a, b| b.baseline_accuracy.total_cmp(&a.baseline_accuracy).then(a.target.cmp(&b.target)));
    let slice = |rs: Vec<&SummaryRow>| {
        let a: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
        let b: Vec<f64> = rs.iter().map(|r| r.baseline_accuracy).collect();
        SliceStats {
            users: rs.iter().map(|r| r.target).collect(),
            mean: mean(&a).expect("non-empty slice"),
            baseline_mean: mean(&b).expect("non-empty slice"),
        }
    };
    let k = SLICE.min(ranked.len());
    let top = slice(ranked[..k].to_vec());
    let mut worst: Vec<&SummaryRow> = rows.iter().collect();
    worst.sort_by(|a, b| a.baseline_accuracy.total_cmp(&b.baseline_accuracy).then(a.target.cmp(&b.target)));
    let flop = slice(worst[..k].to_vec());

    Ok(SummaryTable {
        run_id: results.run_id.clone(),
        baseline_run_id: baseline.run_id.clone(),
        median: median(&acc).expect("non-empty"),
        mean: mean(&acc).expect("non-empty"),
        baseline_median: median(&base).expect("non-empty"),
        baseline_mean: mean(&base).expect("non-empty"),
        rows,
        top,
        flop,
    })
}

impl SummaryTable {
    /// `slice,target,accuracy,baseline_accuracy,delta`: one row per user,
    /// then the median, mean, top and flop aggregates. Aggregate deltas are
    /// differences of the aggregates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice,target,accuracy,baseline_accuracy,delta\n");
        for r in &self.rows {
            writeln!(out, "user,{},{},{},{}", r.target, r.accuracy, r.baseline_accuracy, r.delta).unwrap();
        }
        let aggregates = [
            ("median", self.median, self.baseline_median),
            ("mean", self.mean, self.baseline_mean),
            ("top", self.top.mean, self.top.baseline_mean),
            ("flop", self.flop.mean, self.flop.baseline_mean),
        ];
        for (name, a, b) in aggregates {
            writeln!(out, "{name},,{a},{b},{}", a - b).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::spec::ExperimentKind;

    fn run(id: &str, accs: &[(u32, f64)]) -> RunResults {
        RunResults {
            run_id: id.into(),
            spec: ExperimentSpec::new(ExperimentKind::LowerBaseline),
            folds: accs
                .iter()
                .map(|&(t, a)| FoldResult {
                    target: SubjectId(t),
                    correct: (a * 100.0).round() as usize,
                    total: 100,
                    accuracy: a,
                    repeat_accuracies: vec![],
                    records: None,
                    wall_ms: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[0.7, 0.8, 0.9]), Some(0.8));
        assert_eq!(median(&[0.9, 0.7]), Some(0.8));
        assert_eq!(median(&[]), None);
        assert_eq!(mean(&[1.0, 2.0, 6.0]), Some(3.0));
    }

    #[test]
    fn identical_runs_have_zero_deltas() {
        let a = run("a", &[(0, 0.7), (1, 0.8), (2, 0.9)]);
        let t = summarize(&a, &a).unwrap();
        assert!(t.rows.iter().all(|r| r.delta == 0.0));
        assert_eq!(t.median, 0.8);
    }

    #[test]
    fn slices_rank_by_baseline() {
        let base: Vec<(u32, f64)> = (0..12).map(|i| (i, 0.5 + 0.01 * i as f64)).collect();
        let runv: Vec<(u32, f64)> = (0..12).map(|i| (i, 0.9)).collect();
        let t = summarize(&run("r", &runv), &run("b", &base)).unwrap();
        assert_eq!(t.top.users.len(), 10);
        assert_eq!(t.top.users[0], SubjectId(11));
        assert_eq!(t.flop.users[0], SubjectId(0));
        assert!(!t.top.users.contains(&SubjectId(0)));
        assert!(!t.flop.users.contains(&SubjectId(11)));
    }

    #[test]
    fn fold_mismatch_is_rejected() {
        let a = run("a", &[(0, 0.7), (1, 0.8)]);
        let b = run("b", &[(0, 0.7), (2, 0.8)]);
        assert!(summarize(&a, &b).is_err());
    }
}
