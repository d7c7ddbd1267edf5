use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of one user (domain).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub u32);

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One timestamped accelerometer reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub subject: SubjectId,
    pub activity: String,
    pub timestamp_ns: i64,
    pub accel: [f64; 3],
}

/// A plain 3-axis time series (one `(subject, activity)` recording).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeries {
    pub timestamps_ns: Vec<i64>,
    pub values: Vec<[f64; 3]>,
}

impl TimeSeries {
    pub fn new(timestamps_ns: Vec<i64>, values: Vec<[f64; 3]>) -> Result<Self> {
        if timestamps_ns.len() != values.len() {
            return Err(Error::shape("time series", timestamps_ns.len(), values.len()));
        }
        Ok(Self {
            timestamps_ns,
            values,
        })
    }

    pub fn from_samples(samples: &[Sample]) -> Self {
        Self {
            timestamps_ns: samples.iter().map(|s| s.timestamp_ns).collect(),
            values: samples.iter().map(|s| s.accel).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `window_len x 3` block of consecutive samples, row-major by time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub subject: SubjectId,
    /// Index into the owning dataset's label map.
    pub label: usize,
    pub index: usize,
    pub data: Vec<f64>,
}

impl Window {
    pub const CHANNELS: usize = 3;

    pub fn len(&self) -> usize {
        self.data.len() / Self::CHANNELS
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, t: usize, axis: usize) -> f64 {
        self.data[t * Self::CHANNELS + axis]
    }
}

/// Batch of windows from exactly one source user.
#[derive(Debug, Clone)]
pub struct DomainBatch<'a> {
    source: SubjectId,
    ordinal: usize,
    windows: Vec<&'a Window>,
}

impl<'a> DomainBatch<'a> {
    /// Fails with a contract violation if any window belongs to a user
    /// other than `source`.
    pub fn new(source: SubjectId, ordinal: usize, windows: Vec<&'a Window>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Contract("empty domain batch".into()));
        }
        if let Some(w) = windows.iter().find(|w| w.subject != source) {
            return Err(Error::Contract(format!(
                "domain batch for user {source} contains a window of user {}",
                w.subject
            )));
        }
        Ok(Self {
            source,
            ordinal,
            windows,
        })
    }

    pub fn source(&self) -> SubjectId {
        self.source
    }

    pub fn ordinal(&self) -> usize {
        self.ordinal
    }

    pub fn windows(&self) -> &[&'a Window] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Ordered record of the preprocessing steps that produced a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineDescriptor {
    pub steps: Vec<String>,
}

impl PipelineDescriptor {
    pub const RESAMPLE: &'static str = "resample";
    pub const MOVING_AVERAGE: &'static str = "moving_average";
    pub const MINMAX: &'static str = "minmax";
    pub const WINDOWS: &'static str = "windows";
    pub const SYNTHETIC: &'static str = "synthetic";

    /// Checks that the recorded real-data steps appear in the canonical
    /// resample, filter, scale, window order.
    pub fn check_order(&self) -> Result<()> {
        if self.steps.first().is_some_and(|s| s.starts_with(Self::SYNTHETIC)) {
            return Ok(());
        }
        let canonical = [Self::RESAMPLE, Self::MOVING_AVERAGE, Self::MINMAX, Self::WINDOWS];
        let names: Vec<&str> = self
            .steps
            .iter()
            .map(|s| s.split('(').next().unwrap_or(s))
            .collect();
        if names != canonical {
            return Err(Error::Contract(format!(
                "preprocessing order {names:?} differs from {canonical:?}"
            )));
        }
        Ok(())
    }
}

/// Windowed multi-user dataset. Every user is a potential source or target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub label_map: Vec<String>,
    pub window_len: usize,
    pub stride: usize,
    pub users: BTreeMap<SubjectId, Vec<Window>>,
    /// Number of preprocessed samples per user.
    pub raw_counts: BTreeMap<SubjectId, usize>,
    pub pipeline: PipelineDescriptor,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn user_ids(&self) -> Vec<SubjectId> {
        self.users.keys().copied().collect()
    }

    pub fn windows(&self, user: SubjectId) -> Result<&[Window]> {
        self.users
            .get(&user)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown user {user}")))
    }

    pub fn total_windows(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn window_counts(&self) -> BTreeMap<SubjectId, usize> {
        self.users.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    /// Copy of the dataset restricted to `keep`.
    pub fn subset(&self, keep: &[SubjectId]) -> Dataset {
        let users = self
            .users
            .iter()
            .filter(|(k, _)| keep.contains(k))
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        let raw_counts = self
            .raw_counts
            .iter()
            .filter(|(k, _)| keep.contains(k))
            .map(|(k, v)| (*k, *v))
            .collect();
        Dataset {
            users,
            raw_counts,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            label_map: self.label_map.clone(),
            window_len: self.window_len,
            stride: self.stride,
            users: BTreeMap::new(),
            raw_counts: BTreeMap::new(),
            pipeline: self.pipeline.clone(),
        }
    }

    /// Checks shapes and label ranges of every window.
    pub fn validate(&self) -> Result<()> {
        if self.label_map.is_empty() {
            return Err(Error::Data("dataset has no labels".into()));
        }
        for (user, ws) in &self.users {
            for w in ws {
                if w.subject != *user {
                    return Err(Error::Data(format!("window of user {} filed under {user}", w.subject)));
                }
                if w.data.len() != self.window_len * Window::CHANNELS {
                    return Err(Error::shape("window", self.window_len * Window::CHANNELS, w.data.len()));
                }
                if w.label >= self.label_map.len() {
                    return Err(Error::Data(format!("label {} outside label map", w.label)));
                }
            }
        }
        self.pipeline.check_order()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(subject: u32) -> Window {
        Window {
            subject: SubjectId(subject),
            label: 0,
            index: 0,
            data: vec![0.0; 6],
        }
    }

    #[test]
    fn domain_batch_rejects_mixed_users() {
        let a = win(1);
        let b = win(2);
        assert!(DomainBatch::new(SubjectId(1), 0, vec![&a, &a]).is_ok());
        assert!(matches!(
            DomainBatch::new(SubjectId(1), 0, vec![&a, &b]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn descriptor_order_check() {
        let good = PipelineDescriptor {
            steps: vec![
                "resample(period_ns=50000000)".into(),
                "moving_average(width=4)".into(),
                "minmax(lo=-78,hi=78)".into(),
                "windows(len=40,stride=20)".into(),
            ],
        };
        assert!(good.check_order().is_ok());
        let mut bad = good.clone();
        bad.steps.swap(0, 1);
        assert!(bad.check_order().is_err());
    }
}
