//! Online adaptation of the normalization statistics to a target stream.
//!
//! For every incoming window the adapter computes the normalization-layer
//! inputs, folds them into its live running statistics and only then
//! normalizes and classifies with the updated statistics. Model weights are
//! never touched and no window is retained.

use std::io::Write;
use std::sync::Arc;

use crate::bn::{check_momentum, BnLayerState};
use crate::error::{Error, Result};
use crate::model::network::{argmax, softmax, TrainedModel};

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub index: u64,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    /// Post-update `(mean, var)` per channel, when snapshots are enabled.
    pub snapshot: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamAdapter {
    model: Arc<TrainedModel>,
    live_bn: BnLayerState,
    online_momentum: f64,
    windows_seen: u64,
    adaptation_enabled: bool,
    snapshots: bool,
    poisoned: Option<u64>,
}

/// Creates an adapter whose live statistics start from the model's
/// training statistics.
pub fn init_adapter(model: Arc<TrainedModel>, momentum: f64, adaptation_enabled: bool) -> Result<StreamAdapter> {
    check_momentum(momentum)?;
    let mut live_bn = model.bn.clone();
    live_bn.online_momentum = momentum;
    Ok(StreamAdapter {
        model,
        live_bn,
        online_momentum: momentum,
        windows_seen: 0,
        adaptation_enabled,
        snapshots: false,
        poisoned: None,
    })
}

impl StreamAdapter {
    pub fn with_snapshots(mut self, on: bool) -> Self {
        self.snapshots = on;
        self
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }

    pub fn live_bn(&self) -> &BnLayerState {
        &self.live_bn
    }

    pub fn online_momentum(&self) -> f64 {
        self.online_momentum
    }

    pub fn windows_seen(&self) -> u64 {
        self.windows_seen
    }

    pub fn adaptation_enabled(&self) -> bool {
        self.adaptation_enabled
    }

    /// Index of the window that poisoned the adapter, if any.
    pub fn poisoned(&self) -> Option<u64> {
        self.poisoned
    }

    /// Processes one window: update, then normalize and classify.
    ///
    /// A non-finite window or layer input poisons the adapter; every
    /// later call fails with [`Error::Poisoned`]. `windows_seen` counts
    /// successfully processed windows.
    pub fn adapt_and_classify(&mut self, window: &[f64]) -> Result<StreamRecord> {
        if let Some(at) = self.poisoned {
            return Err(Error::Poisoned(at));
        }
        let z = self.model.layer_inputs(window)?;
        if window.iter().chain(&z).any(|v| !v.is_finite()) {
            self.poisoned = Some(self.windows_seen);
            return Err(Error::Poisoned(self.windows_seen));
        }
        if self.adaptation_enabled {
            self.live_bn.update_online(&z)?;
        }
        let probabilities = softmax(&self.model.head_logits(&z, &self.live_bn));
        let record = StreamRecord {
            index: self.windows_seen,
            predicted: argmax(&probabilities),
            probabilities,
            snapshot: self
                .snapshots
                .then(|| self.live_bn.channels.iter().map(|c| (c.running_mean, c.running_var)).collect()),
        };
        self.windows_seen += 1;
        Ok(record)
    }

    /// Restores the training statistics and clears the counters.
    pub fn reset(&mut self) {
        self.live_bn = self.model.bn.clone();
        self.live_bn.online_momentum = self.online_momentum;
        self.windows_seen = 0;
        self.poisoned = None;
    }

    /// Bytes owned by the adapter besides the shared model.
    pub fn state_size_bytes(&self) -> usize {
        std::mem::size_of::<Self>() + self.live_bn.channels.capacity() * std::mem::size_of_val(&self.live_bn.channels[0])
    }
}

/// Append-only per-window CSV: `tau,predicted,true_label_if_known,prob_0..`.
pub struct DiagnosticsSink<W: Write> {
    writer: csv::Writer<W>,
    classes: usize,
}

impl<W: Write> DiagnosticsSink<W> {
    pub fn new(inner: W, classes: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        let mut header = vec!["tau".to_string(), "predicted".into(), "true_label_if_known".into()];
        header.extend((0..classes).map(|i| format!("prob_{i}")));
        writer.write_record(&header).map_err(csv_err)?;
        Ok(Self { writer, classes })
    }

    pub fn write(&mut self, record: &StreamRecord, true_label: Option<usize>) -> Result<()> {
        if record.probabilities.len() != self.classes {
            return Err(Error::shape("probabilities", self.classes, record.probabilities.len()));
        }
        let mut row = vec![
            record.index.to_string(),
            record.predicted.to_string(),
            true_label.map_or(String::new(), |l| l.to_string()),
        ];
        row.extend(record.probabilities.iter().map(|p| p.to_string()));
        self.writer.write_record(&row).map_err(csv_err)
    }

    pub fn finish(self) -> Result<W> {
        self.writer.into_inner().map_err(|e| Error::Data(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("diagnostics csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bn::update_running_online;
    use crate::model::arch::{ArchConfig, TrainHyper};
    use crate::seed::SeedStream;
    use rand::Rng;

    fn model() -> Arc<TrainedModel> {
        let mut rng = SeedStream::new(5).rng("w");
        let mut m = TrainedModel::init(
            &ArchConfig::tiny(3),
            vec!["a".into(), "b".into(), "c".into()],
            &TrainHyper::default(),
            &mut rng,
        )
        .unwrap();
        for ch in &mut m.bn.channels {
            ch.running_mean = rng.random_range(-0.5..0.5);
            ch.running_var = rng.random_range(0.5..2.0);
        }
        Arc::new(m)
    }

    fn windows(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = SeedStream::new(seed).rng("x");
        (0..n).map(|_| (0..120).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }

    #[test]
    fn momentum_bounds() {
        let m = model();
        assert!(init_adapter(m.clone(), 0.01, true).is_ok());
        assert!(init_adapter(m.clone(), 0.0009, true).is_ok());
        assert!(init_adapter(m.clone(), 0.0, true).is_err());
        assert!(init_adapter(m, 1.0, true).is_err());
    }

    #[test]
    fn disabled_adaptation_equals_predict() {
        let m = model();
        let mut a = init_adapter(m.clone(), 0.05, false).unwrap();
        for w in windows(30, 1) {
            let r = a.adapt_and_classify(&w).unwrap();
            let p = m.predict(&w).unwrap();
            assert_eq!(r.predicted, p.label);
            assert_eq!(r.probabilities, p.probabilities);
        }
        assert_eq!(a.live_bn().channels, m.bn.channels);
        assert_eq!(a.windows_seen(), 30);
    }

    #[test]
    fn statistics_are_updated_before_normalizing() {
        let m = model();
        let mut a = init_adapter(m.clone(), 0.2, true).unwrap().with_snapshots(true);
        let w = &windows(1, 2)[0];
        let r = a.adapt_and_classify(w).unwrap();
        let z = m.layer_inputs(w).unwrap();
        let mut expect = m.bn.clone();
        for (ch, &v) in expect.channels.iter_mut().zip(&z) {
            *ch = update_running_online(ch, v, 0.2).unwrap();
        }
        let probs = softmax(&m.head_logits(&z, &expect));
        assert_eq!(r.probabilities, probs);
        let snap = r.snapshot.unwrap();
        for (s, ch) in snap.iter().zip(&expect.channels) {
            assert_eq!(*s, (ch.running_mean, ch.running_var));
        }
        // Normalizing with the stale statistics gives something else.
        assert_ne!(softmax(&m.head_logits(&z, &m.bn)), probs);
    }

    #[test]
    fn adapters_are_independent() {
        let m = model();
        let mut a = init_adapter(m.clone(), 0.1, true).unwrap();
        let b = init_adapter(m.clone(), 0.1, true).unwrap();
        let before = b.clone();
        for w in windows(5, 3) {
            a.adapt_and_classify(&w).unwrap();
        }
        assert_eq!(b, before);
        assert_ne!(a.live_bn(), b.live_bn());
        assert_eq!(m.bn.channels, b.live_bn().channels);
    }

    #[test]
    fn reset_and_replay() {
        let m = model();
        let ws = windows(20, 4);
        let fresh = init_adapter(m.clone(), 0.05, true).unwrap();
        let mut a = fresh.clone();
        let first: Vec<StreamRecord> = ws.iter().map(|w| a.adapt_and_classify(w).unwrap()).collect();
        a.reset();
        assert_eq!(a, fresh);
        a.reset();
        assert_eq!(a, fresh);
        let again: Vec<StreamRecord> = ws.iter().map(|w| a.adapt_and_classify(w).unwrap()).collect();
        assert_eq!(first, again);
    }

    #[test]
    fn non_finite_input_poisons() {
        let m = model();
        let mut a = init_adapter(m, 0.05, true).unwrap();
        let ws = windows(3, 5);
        a.adapt_and_classify(&ws[0]).unwrap();
        let stats = a.live_bn().clone();
        let mut bad = ws[1].clone();
        bad[7] = f64::NAN;
        assert!(matches!(a.adapt_and_classify(&bad), Err(Error::Poisoned(1))));
        assert!(matches!(a.adapt_and_classify(&ws[2]), Err(Error::Poisoned(1))));
        assert_eq!(a.live_bn(), &stats);
        assert_eq!(a.windows_seen(), 1);
        a.reset();
        assert!(a.adapt_and_classify(&ws[2]).is_ok());
    }

    #[test]
    fn shape_mismatch_does_not_poison() {
        let mut a = init_adapter(model(), 0.05, true).unwrap();
        assert!(matches!(a.adapt_and_classify(&[0.0; 10]), Err(Error::ShapeMismatch { .. })));
        assert!(a.poisoned().is_none());
    }

    #[test]
    fn state_size_is_constant_and_weights_frozen() {
        let m = model();
        let hash = m.weights_hash();
        let mut a = init_adapter(m.clone(), 0.05, true).unwrap();
        let size = a.state_size_bytes();
        for w in windows(500, 6) {
            a.adapt_and_classify(&w).unwrap();
            assert_eq!(a.state_size_bytes(), size);
        }
        assert_eq!(m.weights_hash(), hash);
        assert_eq!(a.model().weights_hash(), hash);
    }

    #[test]
    fn diagnostics_csv() {
        let mut a = init_adapter(model(), 0.05, true).unwrap();
        let mut sink = DiagnosticsSink::new(Vec::new(), 3).unwrap();
        for (i, w) in windows(4, 7).iter().enumerate() {
            let r = a.adapt_and_classify(w).unwrap();
            sink.write(&r, (i % 2 == 0).then_some(1)).unwrap();
        }
        let text = String::from_utf8(sink.finish().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "tau,predicted,true_label_if_known,prob_0,prob_1,prob_2");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("1,") && lines[2].split(',').nth(2) == Some(""));
    }
}
