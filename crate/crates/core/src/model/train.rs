//! Training over single-source batches.
//!
//! Every batch holds windows of exactly one user. In batch-statistics mode
//! the normalization layer standardizes each batch with its own moments,
//! so each user is aligned with its own statistics, and the running
//! estimates are updated once per batch.

use std::collections::BTreeSet;

use log::debug;

use crate::data::batches::make_domain_batches;
use crate::data::types::{Dataset, SubjectId, Window};
use crate::error::{Error, Result};
use crate::model::adam::AdamState;
use crate::model::arch::{ArchConfig, TrainHyper};
use crate::model::network::{NormMode, TrainedModel};
use crate::seed::SeedStream;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub batches_seen: usize,
    /// Epoch whose weights were kept, when early stopping is used.
    pub best_epoch: Option<usize>,
}

/// Trains `f_0` on every user of `dataset`.
pub fn train(dataset: &Dataset, arch: &ArchConfig, hyper: &TrainHyper) -> Result<(TrainedModel, TrainReport)> {
    if dataset.users.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 source users, got {}",
            dataset.users.len()
        )));
    }
    check_compatible(dataset, arch)?;
    hyper.validate()?;
    let sources: Vec<(SubjectId, &[Window])> = dataset.users.iter().map(|(k, v)| (*k, v.as_slice())).collect();
    if let Some((s, ws)) = sources.iter().find(|(_, ws)| ws.len() < hyper.batch_size) {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {} windows of user {s}",
            hyper.batch_size,
            ws.len()
        )));
    }

    let streams = SeedStream::new(hyper.seed);
    let mut model = TrainedModel::init(arch, dataset.label_map.clone(), hyper, &mut streams.rng("weights"))?;
    let report = fit(&mut model, &sources, hyper, hyper.epochs, NormMode::BatchStats, streams, |_, _, _| true)?;
    Ok((model, report))
}

fn check_compatible(dataset: &Dataset, arch: &ArchConfig) -> Result<()> {
    arch.validate()?;
    if dataset.num_classes() != arch.classes {
        return Err(Error::shape("classes", arch.classes, dataset.num_classes()));
    }
    if dataset.window_len != arch.window_len {
        return Err(Error::shape("window length", arch.window_len, dataset.window_len));
    }
    if dataset.users.values().flatten().next().is_none() {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(())
}

/// Epoch loop shared by training and fine-tuning. `on_epoch` sees the
/// epoch index, the model after that epoch and the epoch's mean loss, and
/// returns whether to continue.
pub(crate) fn fit<F>(
    model: &mut TrainedModel,
    sources: &[(SubjectId, &[Window])],
    hyper: &TrainHyper,
    epochs: usize,
    mode: NormMode,
    streams: SeedStream,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(usize, &TrainedModel, f64) -> bool,
{
    let mut shuffle_rng = streams.rng("batches");
    let mut dropout_rng = streams.rng("dropout");
    let mut adam = AdamState::new(
        &model.param_tensors().iter().map(Vec::len).collect::<Vec<_>>(),
        hyper,
    );
    let mut report = TrainReport::default();
    for epoch in 0..epochs {
        let lr = hyper.learning_rate_at(epoch);
        let batches = make_domain_batches(sources, hyper.batch_size, &mut shuffle_rng)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let users: BTreeSet<SubjectId> = batch.windows().iter().map(|w| w.subject).collect();
            if users.len() != 1 {
                return Err(Error::Contract(format!("training batch mixes users {users:?}")));
            }
            let data: Vec<&[f64]> = batch.windows().iter().map(|w| w.data.as_slice()).collect();
            let labels: Vec<usize> = batch.windows().iter().map(|w| w.label).collect();
            let (_, cache) = model.forward(&data, mode, Some(&mut dropout_rng))?;
            let grads = model.backward(&cache, &labels)?;
            if !grads.loss.is_finite() {
                return Err(Error::Data(format!("training diverged at epoch {epoch}")));
            }
            loss_sum += grads.loss;
            let tensors = grads.tensors();
            model.update_params(|params| adam.step(params, &tensors, lr))?;
            if let Some(moments) = &cache.moments {
                model.bn.update_train(moments)?;
            }
            report.batches_seen += 1;
        }
        let mean_loss = loss_sum / batches.len().max(1) as f64;
        debug!("epoch {epoch}: loss {mean_loss:.5} lr {lr:.3e}");
        report.epoch_losses.push(mean_loss);
        if !on_epoch(epoch, model, mean_loss) {
            break;
        }
    }
    Ok(report)
}

/// Further training on one user's labelled windows. The batch size is
/// capped at the number of windows.
pub fn fine_tune(
    model: &mut TrainedModel,
    windows: &[Window],
    hyper: &TrainHyper,
    epochs: usize,
    mode: NormMode,
    streams: SeedStream,
) -> Result<TrainReport> {
    let source = single_user(windows)?;
    let hyper = TrainHyper {
        batch_size: hyper.batch_size.min(windows.len()),
        ..hyper.clone()
    };
    hyper.validate()?;
    fit(model, &[(source, windows)], &hyper, epochs, mode, streams, |_, _, _| true)
}

fn single_user(windows: &[Window]) -> Result<SubjectId> {
    let first = windows.first().ok_or_else(|| Error::invalid("no windows to train on"))?;
    if windows.iter().any(|w| w.subject != first.subject) {
        return Err(Error::Contract("per-user training set mixes users".into()));
    }
    Ok(first.subject)
}

/// Accuracy with the model's running statistics.
pub fn accuracy(model: &TrainedModel, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let data: Vec<&[f64]> = windows.iter().map(|w| w.data.as_slice()).collect();
    let preds = model.predict_batch(&data)?;
    let correct = preds.iter().zip(windows).filter(|(p, w)| p.label == w.label).count();
    Ok(correct as f64 / windows.len() as f64)
}

/// A model trained on one user only, keeping the weights of the epoch with
/// the best validation accuracy and stopping after `patience` epochs
/// without improvement.
pub fn train_personal(
    train_set: &[Window],
    validation: &[Window],
    label_map: Vec<String>,
    arch: &ArchConfig,
    hyper: &TrainHyper,
    patience: usize,
) -> Result<(TrainedModel, TrainReport)> {
    let source = single_user(train_set)?;
    hyper.validate()?;
    arch.validate()?;
    let hyper = TrainHyper {
        batch_size: hyper.batch_size.min(train_set.len()),
        ..hyper.clone()
    };
    hyper.validate()?;
    let streams = SeedStream::new(hyper.seed);
    let mut model = TrainedModel::init(arch, label_map, &hyper, &mut streams.rng("weights"))?;

    let mut best: Option<(f64, usize, TrainedModel)> = None;
    let mut failure = None;
    let mut report = fit(
        &mut model,
        &[(source, train_set)],
        &hyper,
        hyper.epochs,
        NormMode::BatchStats,
        streams,
        |epoch, m, _| {
            let acc = if validation.is_empty() {
                Ok(0.0)
            } else {
                accuracy(m, validation)
            };
            match acc {
                Ok(acc) => {
                    if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                        best = Some((acc, epoch, m.clone()));
                    }
                    let since = epoch - best.as_ref().map_or(epoch, |b| b.1);
                    since < patience
                }
                Err(e) => {
                    failure = Some(e);
                    false
                }
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    match best {
        Some((_, epoch, m)) if !validation.is_empty() => {
            report.best_epoch = Some(epoch);
            Ok((m, report))
        }
        _ => Ok((model, report)),
    }
}
