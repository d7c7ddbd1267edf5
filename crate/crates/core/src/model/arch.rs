use serde::{Deserialize, Serialize};

use crate::bn::{check_momentum, DEFAULT_TRAIN_MOMENTUM};
use crate::error::{Error, Result};

/// Shape of the 1-D convolutional network: a block of zero-padded
/// convolutions with ReLU, one non-overlapping max pool, one dense layer
/// with adaptive normalization, dropout and ReLU, and a softmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub conv_layers: usize,
    pub feature_maps: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
    pub dense_width: usize,
    pub dropout_rate: f64,
    pub classes: usize,
    pub window_len: usize,
    pub in_channels: usize,
}

impl ArchConfig {
    /// The full-size network used for the WISDM experiments.
    pub fn standard(classes: usize) -> Self {
        Self {
            conv_layers: 5,
            feature_maps: 64,
            kernel: 5,
            stride: 1,
            pool: 4,
            dense_width: 256,
            dropout_rate: 0.5,
            classes,
            window_len: 40,
            in_channels: 3,
        }
    }

    /// Small variant for tests and the synthetic suite.
    pub fn tiny(classes: usize) -> Self {
        Self {
            conv_layers: 1,
            feature_maps: 8,
            kernel: 5,
            dense_width: 16,
            ..Self::standard(classes)
        }
    }

    pub fn with_dropout_rate(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn pooled_len(&self) -> usize {
        self.window_len / self.pool
    }

    /// Length of the flattened conv-block output.
    pub fn feature_len(&self) -> usize {
        self.feature_maps * self.pooled_len()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("conv_layers", self.conv_layers),
            ("feature_maps", self.feature_maps),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("pool", self.pool),
            ("dense_width", self.dense_width),
            ("classes", self.classes),
            ("window_len", self.window_len),
            ("in_channels", self.in_channels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("architecture field {name} must be >= 1")));
        }
        if self.stride != 1 {
            return Err(Error::invalid("only stride-1 convolutions are supported"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if self.window_len % self.pool != 0 {
            return Err(Error::invalid(format!(
                "pool size {} does not divide window length {}",
                self.pool, self.window_len
            )));
        }
        Ok(())
    }
}

/// How the learning rate decays over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecaySchedule {
    /// `lr / (1 + decay * epoch)`
    InverseTime,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_schedule: DecaySchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay: 1e-3,
            decay_schedule: DecaySchedule::InverseTime,
            epochs: 649,
            batch_size: 177,
            train_momentum: DEFAULT_TRAIN_MOMENTUM,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::invalid("decay must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be > 1"));
        }
        check_momentum(self.train_momentum)?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_opt > 0.0) {
            return Err(Error::invalid("invalid ADAM constants"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.decay_schedule {
            DecaySchedule::InverseTime => self.learning_rate / (1.0 + self.decay * epoch as f64),
            DecaySchedule::Constant => self.learning_rate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_shapes() {
        let a = ArchConfig::standard(5);
        a.validate().unwrap();
        assert_eq!(a.pooled_len(), 10);
        assert_eq!(a.feature_len(), 640);
        assert_eq!(a.dropout_rate, 0.5);
    }

    #[test]
    fn invalid_architectures() {
        let mut a = ArchConfig::tiny(3);
        a.pool = 3;
        assert!(a.validate().is_err());
        assert!(ArchConfig::tiny(3).with_dropout_rate(1.0).validate().is_err());
        let mut a = ArchConfig::tiny(3);
        a.classes = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn default_hyper_and_decay() {
        let h = TrainHyper::default();
        assert_eq!((h.learning_rate, h.decay, h.epochs, h.batch_size), (1e-4, 1e-3, 649, 177));
        assert_eq!(h.learning_rate_at(0), 1e-4);
        assert!((h.learning_rate_at(1000) - 5e-5).abs() < 1e-18);
        assert!(TrainHyper { batch_size: 1, ..h }.validate().is_err());
    }
}
