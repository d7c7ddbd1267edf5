//! Per-target evaluation of one experiment kind.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::types::{SubjectId, Window};
use crate::error::{Error, Result};
use crate::eval::spec::{ExperimentKind, ExperimentSpec};
use crate::eval::split::{split_indices, stratified_split};
use crate::model::arch::{ArchConfig, TrainHyper};
use crate::model::network::{NormMode, TrainedModel};
use crate::model::train::{fine_tune, train_personal};
use crate::online::init_adapter;
use crate::seed::SeedStream;

/// Prediction for one target window; `index` is its position in the
/// target's stored order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub repeat: usize,
    pub tau: usize,
    pub index: usize,
    pub true_label: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub target: SubjectId,
    pub correct: usize,
    pub total: usize,
    /// `correct / total`.
    pub accuracy: f64,
    /// One accuracy per shuffled repeat (randomized streams only).
    pub repeat_accuracies: Vec<f64>,
    pub records: Option<Vec<WindowRecord>>,
    pub wall_ms: u64,
}

impl FoldResult {
    fn new(target: SubjectId, records: Vec<WindowRecord>, repeats: usize, keep: bool, started: Instant) -> Result<Self> {
        let total = records.len();
        if total == 0 {
            return Err(Error::invalid(format!("no windows evaluated for user {target}")));
        }
        let correct = records.iter().filter(|r| r.predicted == r.true_label).count();
        let repeat_accuracies = if repeats > 1 {
            (0..repeats)
                .map(|k| {
                    let rs: Vec<_> = records.iter().filter(|r| r.repeat == k).collect();
                    rs.iter().filter(|r| r.predicted == r.true_label).count() as f64 / rs.len() as f64
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            target,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
            repeat_accuracies,
            records: keep.then_some(records),
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

fn target_of(windows: &[Window]) -> Result<SubjectId> {
    let first = windows.first().ok_or_else(|| Error::invalid("empty target stream"))?;
    if windows.iter().any(|w| w.subject != first.subject) {
        return Err(Error::Contract("target stream mixes users".into()));
    }
    Ok(first.subject)
}

/// Frozen-statistics predictions for `target[i]`, `i` in `positions`.
fn records_from_predictions(model: &TrainedModel, target: &[Window], positions: &[usize]) -> Result<Vec<WindowRecord>> {
    let data: Vec<&[f64]> = positions.iter().map(|&i| target[i].data.as_slice()).collect();
    let preds = model.predict_batch(&data)?;
    Ok(preds
        .iter()
        .zip(positions)
        .enumerate()
        .map(|(tau, (p, &index))| WindowRecord {
            repeat: 0,
            tau,
            index,
            true_label: target[index].label,
            predicted: p.label,
        })
        .collect())
}

/// Frozen-statistics predictions for every target window.
pub fn run_lower_baseline(model: &TrainedModel, target: &[Window], keep_records: bool) -> Result<FoldResult> {
    let started = Instant::now();
    let subject = target_of(target)?;
    let positions: Vec<usize> = (0..target.len()).collect();
    let records = records_from_predictions(model, target, &positions)?;
    FoldResult::new(subject, records, 1, keep_records, started)
}

/// Streams the target through a fresh adapter per repeat. The
/// unrandomized stream keeps the stored order; the randomized one is a
/// uniform shuffle per repeat and the accuracy pools all repeats.
#[allow(clippy::too_many_arguments)]
pub fn run_online(
    model: Arc<TrainedModel>,
    target: &[Window],
    momentum: f64,
    randomized: bool,
    repeats: usize,
    adaptation_enabled: bool,
    seed: u64,
    keep_records: bool,
) -> Result<FoldResult> {
    let started = Instant::now();
    let subject = target_of(target)?;
    let repeats = if randomized { repeats } else { 1 };
    if repeats == 0 {
        return Err(Error::invalid("at least one repeat is needed"));
    }
    let fresh = init_adapter(model, momentum, adaptation_enabled)?;
    let streams = SeedStream::new(seed).child("online-order");
    let mut records = Vec::with_capacity(repeats * target.len());
    for repeat in 0..repeats {
        let mut order: Vec<usize> = (0..target.len()).collect();
        if randomized {
            order.shuffle(&mut streams.rng(&format!("repeat-{repeat}")));
        }
        let mut adapter = fresh.clone();
        for (tau, &i) in order.iter().enumerate() {
            let r = adapter.adapt_and_classify(&target[i].data)?;
            records.push(WindowRecord {
                repeat,
                tau,
                index: i,
                true_label: target[i].label,
                predicted: r.predicted,
            });
        }
    }
    FoldResult::new(subject, records, repeats, keep_records, started)
}

/// Batch re-estimation on a stratified pre-estimation split of the target.
///
/// The running statistics are replaced by the plain moments of the
/// pre-estimation set's layer inputs. With `supervised`, the weights are
/// first fine-tuned on the labelled pre-estimation set in
/// batch-statistics mode. Only the remaining windows are evaluated.
#[allow(clippy::too_many_arguments)]
pub fn run_batch_da(
    model: &TrainedModel,
    target: &[Window],
    pre_fraction: f64,
    supervised: bool,
    fine_tune_epochs: usize,
    adaptation_enabled: bool,
    seed: u64,
    keep_records: bool,
) -> Result<FoldResult> {
    let started = Instant::now();
    let subject = target_of(target)?;
    let streams = SeedStream::new(seed);
    let (pre, test) = split_indices(target, pre_fraction, &mut streams.rng("pre-split"))?;
    let mut adapted = model.clone();
    if adaptation_enabled {
        if supervised {
            let owned: Vec<Window> = pre.iter().map(|&i| target[i].clone()).collect();
            fine_tune(&mut adapted, &owned, &model.hyper, fine_tune_epochs, NormMode::BatchStats, streams.child("fine-tune"))?;
        }
        let data: Vec<&[f64]> = pre.iter().map(|&i| target[i].data.as_slice()).collect();
        let z = adapted.layer_inputs_batch(&data)?;
        let moments = adapted.bn.moments(&z)?;
        adapted.bn.set_running(&moments)?;
    }
    let records = records_from_predictions(&adapted, target, &test)?;
    FoldResult::new(subject, records, 1, keep_records, started)
}

/// Fine-tunes the weights on the labelled pre-estimation set while
/// normalizing with the frozen training statistics.
pub fn run_supervised_baseline(
    model: &TrainedModel,
    target: &[Window],
    pre_fraction: f64,
    fine_tune_epochs: usize,
    seed: u64,
    keep_records: bool,
) -> Result<FoldResult> {
    let started = Instant::now();
    let subject = target_of(target)?;
    let streams = SeedStream::new(seed);
    let (pre, test) = split_indices(target, pre_fraction, &mut streams.rng("pre-split"))?;
    let mut tuned = model.clone();
    let owned: Vec<Window> = pre.iter().map(|&i| target[i].clone()).collect();
    fine_tune(&mut tuned, &owned, &model.hyper, fine_tune_epochs, NormMode::GlobalStats, streams.child("fine-tune"))?;
    let records = records_from_predictions(&tuned, target, &test)?;
    FoldResult::new(subject, records, 1, keep_records, started)
}

/// A personal model trained on a stratified 80 % of the target (a tenth
/// of which is held out for early stopping) and tested on the other 20 %.
#[allow(clippy::too_many_arguments)]
pub fn run_upper_baseline(
    target: &[Window],
    label_map: Vec<String>,
    arch: &ArchConfig,
    hyper: &TrainHyper,
    patience: usize,
    seed: u64,
    keep_records: bool,
) -> Result<FoldResult> {
    let started = Instant::now();
    let subject = target_of(target)?;
    let streams = SeedStream::new(seed);
    let (train_part, test) = split_indices(target, 0.8, &mut streams.rng("upper-split"))?;
    let owned: Vec<Window> = train_part.iter().map(|&i| target[i].clone()).collect();
    let (validation, fit_set) = stratified_split(&owned, 0.1, &mut streams.rng("upper-validation"))?;
    let validation: Vec<Window> = validation.into_iter().cloned().collect();
    let fit_set: Vec<Window> = fit_set.into_iter().cloned().collect();
    let hyper = TrainHyper {
        seed: streams.derive("upper-weights"),
        ..hyper.clone()
    };
    let (model, _) = train_personal(&fit_set, &validation, label_map, arch, &hyper, patience)?;
    let records = records_from_predictions(&model, target, &test)?;
    FoldResult::new(subject, records, 1, keep_records, started)
}

/// Dispatches `spec` for one fold. `model` is the fold's general model
/// (unused by the upper baseline).
pub fn run_fold(
    spec: &ExperimentSpec,
    model: Option<Arc<TrainedModel>>,
    target: &[Window],
    label_map: &[String],
    arch: &ArchConfig,
    hyper: &TrainHyper,
) -> Result<FoldResult> {
    spec.validate()?;
    let subject = target_of(target)?;
    let seed = SeedStream::new(spec.seed).derive(&format!("fold-{subject}"));
    let keep = spec.keep_records;
    let need = || model.clone().ok_or_else(|| Error::invalid(format!("{} needs the fold model", spec.kind)));
    match spec.kind {
        ExperimentKind::LowerBaseline => run_lower_baseline(&*need()?, target, keep),
        ExperimentKind::UpperBaseline => {
            run_upper_baseline(target, label_map.to_vec(), arch, hyper, spec.patience, seed, keep)
        }
        ExperimentKind::UnsupervisedBatch | ExperimentKind::SupervisedBatch => run_batch_da(
            &*need()?,
            target,
            spec.pre_fraction.expect("validated"),
            spec.kind == ExperimentKind::SupervisedBatch,
            spec.fine_tune_epochs,
            spec.adaptation_enabled,
            seed,
            keep,
        ),
        ExperimentKind::SupervisedBaseline => run_supervised_baseline(
            &*need()?,
            target,
            spec.pre_fraction.expect("validated"),
            spec.fine_tune_epochs,
            seed,
            keep,
        ),
        ExperimentKind::OnlineUnrandomized | ExperimentKind::OnlineRandomized => run_online(
            need()?,
            target,
            spec.momentum.expect("validated"),
            spec.kind == ExperimentKind::OnlineRandomized,
            spec.repeats,
            spec.adaptation_enabled,
            seed,
            keep,
        ),
    }
}
