use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bn::{check_momentum, DEFAULT_ONLINE_MOMENTUM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LowerBaseline,
    UpperBaseline,
    UnsupervisedBatch,
    SupervisedBatch,
    SupervisedBaseline,
    OnlineUnrandomized,
    OnlineRandomized,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::LowerBaseline,
        Self::UpperBaseline,
        Self::UnsupervisedBatch,
        Self::SupervisedBatch,
        Self::SupervisedBaseline,
        Self::OnlineUnrandomized,
        Self::OnlineRandomized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LowerBaseline => "lower-baseline",
            Self::UpperBaseline => "upper-baseline",
            Self::UnsupervisedBatch => "unsupervised-batch",
            Self::SupervisedBatch => "supervised-batch",
            Self::SupervisedBaseline => "supervised-baseline",
            Self::OnlineUnrandomized => "online-unrandomized",
            Self::OnlineRandomized => "online-randomized",
        }
    }

    pub fn is_online(self) -> bool {
        matches!(self, Self::OnlineUnrandomized | Self::OnlineRandomized)
    }

    /// Kinds that split the target into a pre-estimation and a test set.
    pub fn uses_split(self) -> bool {
        matches!(self, Self::UnsupervisedBatch | Self::SupervisedBatch | Self::SupervisedBaseline)
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Self::SupervisedBatch | Self::SupervisedBaseline)
    }

    /// Whether the general model of each fold is needed.
    pub fn needs_fold_model(self) -> bool {
        self != Self::UpperBaseline
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Online kinds only.
    pub momentum: Option<f64>,
    /// Split kinds only: fraction of the target used for (pre-)estimation.
    pub pre_fraction: Option<f64>,
    pub fine_tune_epochs: usize,
    /// Shuffled repeats of the randomized online stream.
    pub repeats: usize,
    /// Off reproduces the frozen-statistics model on every path.
    pub adaptation_enabled: bool,
    /// Epochs without validation improvement before the personal model
    /// stops training.
    pub patience: usize,
    pub keep_records: bool,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::LowerBaseline,
            momentum: None,
            pre_fraction: None,
            fine_tune_epochs: 10,
            repeats: 5,
            adaptation_enabled: true,
            patience: 20,
            keep_records: false,
            seed: 0,
        }
    }
}

impl ExperimentSpec {
    /// A spec of `kind` with the defaults its fields need.
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            momentum: kind.is_online().then_some(DEFAULT_ONLINE_MOMENTUM),
            pre_fraction: kind.uses_split().then_some(0.1),
            ..Default::default()
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = Some(momentum);
        self
    }

    pub fn with_pre_fraction(mut self, fraction: f64) -> Self {
        self.pre_fraction = Some(fraction);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        match (kind.is_online(), self.momentum) {
            (true, None) => return Err(Error::invalid(format!("{kind} needs a momentum"))),
            (true, Some(m)) => check_momentum(m)?,
            (false, Some(_)) => return Err(Error::invalid(format!("{kind} takes no momentum"))),
            (false, None) => {}
        }
        match (kind.uses_split(), self.pre_fraction) {
            (true, None) => return Err(Error::invalid(format!("{kind} needs a pre-estimation fraction"))),
            (true, Some(f)) if !(f > 0.0 && f < 1.0) => {
                return Err(Error::invalid(format!("pre-estimation fraction {f} outside (0, 1)")))
            }
            (false, Some(_)) => return Err(Error::invalid(format!("{kind} takes no pre-estimation fraction"))),
            _ => {}
        }
        if kind.is_supervised() && self.fine_tune_epochs == 0 {
            return Err(Error::invalid(format!("{kind} needs at least one fine-tuning epoch")));
        }
        if kind == ExperimentKind::OnlineRandomized && self.repeats == 0 {
            return Err(Error::invalid("randomized streams need at least one repeat"));
        }
        if kind == ExperimentKind::UpperBaseline && self.patience == 0 {
            return Err(Error::invalid("patience must be >= 1"));
        }
        Ok(())
    }
}
