use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::cache::dataset_hash;
use crate::data::types::{Dataset, SubjectId};
use crate::error::{Error, Result};
use crate::eval::experiments::{run_fold, FoldResult};
use crate::eval::spec::{ExperimentKind, ExperimentSpec};
use crate::eval::summary::{summarize, RunResults, SummaryTable};
use crate::model::arch::{ArchConfig, TrainHyper};
use crate::model::network::TrainedModel;
use crate::model::train::train;

/// In-memory store of trained fold models keyed by
/// (dataset hash, arch, hyper, target).
#[derive(Debug, Default)]
pub struct FoldCache {
    models: Mutex<BTreeMap<String, Arc<TrainedModel>>>,
    trainings: AtomicUsize,
}

impl FoldCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of models trained through this cache.
    pub fn trainings(&self) -> usize {
        self.trainings.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.models.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Arc<TrainedModel>> {
        self.models.lock().expect("cache lock").get(key).cloned()
    }

    fn get_or_train<F>(&self, key: &str, train_fn: F) -> Result<Arc<TrainedModel>>
    where
        F: FnOnce() -> Result<TrainedModel>,
    {
        if let Some(m) = self.get(key) {
            return Ok(m);
        }
        let model = Arc::new(train_fn()?);
        self.trainings.fetch_add(1, Ordering::SeqCst);
        Ok(self
            .models
            .lock()
            .expect("cache lock")
            .entry(key.to_string())
            .or_insert(model)
            .clone())
    }
}

pub fn fold_key(dataset_hash: &str, arch: &ArchConfig, hyper: &TrainHyper, target: SubjectId) -> String {
    let mut h = Sha256::new();
    h.update(dataset_hash.as_bytes());
    h.update(serde_json::to_vec(arch).expect("arch serializes"));
    h.update(serde_json::to_vec(hyper).expect("hyper serializes"));
    h.update(target.0.to_le_bytes());
    hex::encode(h.finalize())
}

/// Trains (or fetches) the general model of the fold holding out `target`.
pub fn fold_model(
    dataset: &Dataset,
    ds_hash: &str,
    arch: &ArchConfig,
    hyper: &TrainHyper,
    target: SubjectId,
    cache: &FoldCache,
) -> Result<Arc<TrainedModel>> {
    let key = fold_key(ds_hash, arch, hyper, target);
    cache.get_or_train(&key, || {
        let others: Vec<SubjectId> = dataset.user_ids().into_iter().filter(|&u| u != target).collect();
        let training = dataset.subset(&others);
        if training.users.contains_key(&target) || training.users.values().flatten().any(|w| w.subject == target) {
            return Err(Error::Contract(format!("fold {target} leaks the target into training")));
        }
        info!("training fold model for target {target} on {} users", training.users.len());
        let (model, _) = train(&training, arch, hyper)?;
        Ok(model)
    })
}

/// Leave-one-person-out evaluation: every user is the target once, with a
/// model trained on all other users. Results are ordered by target.
pub fn lopocv(
    dataset: &Dataset,
    arch: &ArchConfig,
    hyper: &TrainHyper,
    spec: &ExperimentSpec,
    cache: &FoldCache,
) -> Result<Vec<FoldResult>> {
    spec.validate()?;
    if dataset.users.len() < 2 {
        return Err(Error::invalid(format!(
            "cross-validation needs at least 2 users, got {}",
            dataset.users.len()
        )));
    }
    let targets = dataset.user_ids();
    let models: Vec<Option<Arc<TrainedModel>>> = if spec.kind.needs_fold_model() {
        let ds_hash = dataset_hash(dataset);
        targets
            .par_iter()
            .map(|&t| fold_model(dataset, &ds_hash, arch, hyper, t, cache).map(Some))
            .collect::<Result<_>>()?
    } else {
        vec![None; targets.len()]
    };
    targets
        .par_iter()
        .zip(models)
        .map(|(&t, model)| run_fold(spec, model, dataset.windows(t)?, &dataset.label_map, arch, hyper))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub momentum: f64,
    pub run: RunResults,
    pub summary: SummaryTable,
}

/// One cross-validation per momentum, summarized against the lower
/// baseline. Fold models are shared across momenta through `cache`.
pub fn momentum_sweep(
    dataset: &Dataset,
    arch: &ArchConfig,
    hyper: &TrainHyper,
    base: &ExperimentSpec,
    momenta: &[f64],
    cache: &FoldCache,
) -> Result<Vec<SweepEntry>> {
    if momenta.is_empty() {
        return Err(Error::invalid("empty momentum list"));
    }
    if !base.kind.is_online() {
        return Err(Error::invalid(format!("momentum sweep over non-online kind {}", base.kind)));
    }
    for &m in momenta {
        base.clone().with_momentum(m).validate()?;
    }
    let ds_hash = dataset_hash(dataset);
    let baseline_spec = ExperimentSpec {
        kind: ExperimentKind::LowerBaseline,
        momentum: None,
        pre_fraction: None,
        ..base.clone()
    };
    let baseline = RunResults::new(
        &baseline_spec,
        &ds_hash,
        arch,
        hyper,
        lopocv(dataset, arch, hyper, &baseline_spec, cache)?,
    );
    momenta
        .iter()
        .map(|&m| {
            let spec = base.clone().with_momentum(m);
            let run = RunResults::new(&spec, &ds_hash, arch, hyper, lopocv(dataset, arch, hyper, &spec, cache)?);
            let summary = summarize(&run, &baseline)?;
            Ok(SweepEntry { momentum: m, run, summary })
        })
        .collect()
}
