//! Run directory layout:
//!
//! ```text
//! <root>/<run-id>/manifest.json
//!                 folds.csv           target,accuracy,wall_ms,correct,total
//!                 summary.csv         (when a baseline is given)
//!                 stream_<target>.csv (when per-window records are kept)
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::summary::{RunResults, SummaryTable};
use crate::model::arch::{ArchConfig, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub spec: crate::eval::spec::ExperimentSpec,
    pub arch: ArchConfig,
    pub hyper: TrainHyper,
    pub dataset_hash: String,
    pub folds: usize,
    /// Hash of the fold results without wall times.
    pub result_hash: String,
    pub baseline_run_id: Option<String>,
}

pub fn folds_csv(run: &RunResults) -> String {
    let mut out = String::from("target,accuracy,wall_ms,correct,total\n");
    for f in &run.folds {
        writeln!(out, "{},{},{},{},{}", f.target, f.accuracy, f.wall_ms, f.correct, f.total).unwrap();
    }
    out
}

pub fn write_run(
    root: &Path,
    run: &RunResults,
    arch: &ArchConfig,
    hyper: &TrainHyper,
    dataset_hash: &str,
    summary: Option<&SummaryTable>,
) -> Result<PathBuf> {
    let dir = root.join(&run.run_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = RunManifest {
        run_id: run.run_id.clone(),
        spec: run.spec.clone(),
        arch: arch.clone(),
        hyper: hyper.clone(),
        dataset_hash: dataset_hash.to_string(),
        folds: run.folds.len(),
        result_hash: run.result_hash(),
        baseline_run_id: summary.map(|s| s.baseline_run_id.clone()),
    };
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(
        "manifest.json",
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    write("folds.csv", folds_csv(run))?;
    if let Some(s) = summary {
        write("summary.csv", s.to_csv())?;
    }
    for f in &run.folds {
        if let Some(records) = &f.records {
            let mut out = String::from("repeat,tau,index,true_label,predicted\n");
            for r in records {
                writeln!(out, "{},{},{},{},{}", r.repeat, r.tau, r.index, r.true_label, r.predicted).unwrap();
            }
            write(&format!("stream_{}.csv", f.target), out)?;
        }
    }
    Ok(dir)
}
