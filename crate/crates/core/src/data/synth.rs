//! Synthetic multi-user accelerometer data with per-user covariate shift.
//!
//! Every class has one base signal generator (a per-axis mean plus a
//! class-specific oscillation and white noise). Every user applies one
//! fixed per-axis affine transform to all of its samples, so the
//! class-conditional structure is shared while the marginals differ.
//! Optionally one user switches to a second transform mid-stream.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::preprocess::make_windows;
use crate::data::types::{Dataset, PipelineDescriptor, SubjectId, Window};
use crate::error::{Error, Result};
use crate::seed::SeedStream;

const SAMPLE_HZ: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub offset: [f64; 3],
    pub scale: [f64; 3],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        offset: [0.0; 3],
        scale: [1.0; 3],
    };

    fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| *s == 0.0 || !s.is_finite()) || self.offset.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid(format!("degenerate affine transform {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, data: &mut [f64]) {
        for (i, v) in data.iter_mut().enumerate() {
            let a = i % Window::CHANNELS;
            *v = self.scale[a] * *v + self.offset[a];
        }
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTransform {
    pub user: u32,
    pub offset: [f64; 3],
    pub scale: [f64; 3],
}

/// Switches `user` to `transform` from window position `at_window` on.
/// The drifting user's windows are emitted in shuffled class order so
/// both segments contain every class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub user: u32,
    pub at_window: usize,
    pub offset: [f64; 3],
    pub scale: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    /// Per-axis offsets are drawn uniformly from `[-offset_spread, offset_spread]`.
    pub offset_spread: f64,
    /// Per-axis scales are `exp(u)` with `u` uniform in `[-scale_spread, scale_spread]`.
    pub scale_spread: f64,
    /// Explicit transforms overriding the random draw.
    pub users: Vec<UserTransform>,
    pub drift: Option<DriftSpec>,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            offset_spread: 0.0,
            scale_spread: 0.0,
            users: Vec::new(),
            drift: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalSpec {
    /// Distance scale between class means.
    pub class_separation: f64,
    pub amplitude: f64,
    pub noise: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            class_separation: 1.0,
            amplitude: 0.5,
            noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_users: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub window_len: usize,
    pub stride: usize,
    pub signal: SignalSpec,
    pub shift: ShiftSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_users: 6,
            classes: 4,
            samples_per_class: 1200,
            window_len: 40,
            stride: 20,
            signal: SignalSpec::default(),
            shift: ShiftSpec::default(),
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            kind: "synthetic spec",
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users < 2 || self.classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 users and 2 classes"));
        }
        if self.window_len == 0 || self.stride == 0 || self.samples_per_class < self.window_len {
            return Err(Error::invalid("samples per class must cover at least one window"));
        }
        let spreads = [self.shift.offset_spread, self.shift.scale_spread];
        if spreads.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("shift spreads must be finite and >= 0"));
        }
        if !(self.signal.noise >= 0.0 && self.signal.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and >= 0"));
        }
        for u in &self.shift.users {
            if u.user as usize >= self.num_users {
                return Err(Error::invalid(format!("transform for unknown user {}", u.user)));
            }
            AffineTransform {
                offset: u.offset,
                scale: u.scale,
            }
            .validate()?;
        }
        if let Some(d) = &self.shift.drift {
            if d.user as usize >= self.num_users {
                return Err(Error::invalid(format!("drift for unknown user {}", d.user)));
            }
            AffineTransform {
                offset: d.offset,
                scale: d.scale,
            }
            .validate()?;
        }
        Ok(())
    }

    fn streams(&self) -> SeedStream {
        SeedStream::new(self.seed).child("synth")
    }

    /// The per-user transforms in effect before any drift.
    pub fn transforms(&self) -> Result<BTreeMap<SubjectId, AffineTransform>> {
        self.validate()?;
        let mut rng = self.streams().rng("transforms");
        let mut out = BTreeMap::new();
        for k in 0..self.num_users {
            let mut t = AffineTransform::IDENTITY;
            for a in 0..3 {
                let o: f64 = rng.random_range(-1.0..=1.0);
                let s: f64 = rng.random_range(-1.0..=1.0);
                t.offset[a] = o * self.shift.offset_spread;
                t.scale[a] = (s * self.shift.scale_spread).exp();
            }
            if let Some(u) = self.shift.users.iter().find(|u| u.user as usize == k) {
                t = AffineTransform {
                    offset: u.offset,
                    scale: u.scale,
                };
            }
            out.insert(SubjectId(k as u32), t);
        }
        Ok(out)
    }

    /// Mean of class `class` on `axis` before any user transform.
    pub fn base_mean(&self, class: usize, axis: usize) -> f64 {
        let angle = 2.0 * PI * class as f64 / self.classes as f64 + 2.0 * PI * axis as f64 / 3.0;
        self.signal.class_separation * angle.cos()
    }

    fn base_frequency_hz(&self, class: usize) -> f64 {
        1.0 + 0.5 * class as f64
    }

    fn base_series(&self, user: usize, class: usize) -> Vec<[f64; 3]> {
        let mut rng = self.streams().rng(&format!("signal/{user}/{class}"));
        let noise = Normal::new(0.0, self.signal.noise).expect("validated noise");
        let phase: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.0..2.0 * PI));
        let f = self.base_frequency_hz(class);
        (0..self.samples_per_class)
            .map(|i| {
                let t = i as f64 / SAMPLE_HZ;
                [0, 1, 2].map(|a| {
                    self.base_mean(class, a)
                        + self.signal.amplitude * (2.0 * PI * f * t + phase[a]).sin()
                        + noise.sample(&mut rng)
                })
            })
            .collect()
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    let transforms = spec.transforms()?;
    let mut users = BTreeMap::new();
    let mut raw_counts = BTreeMap::new();
    for k in 0..spec.num_users {
        let id = SubjectId(k as u32);
        let mut windows: Vec<Window> = Vec::new();
        for m in 0..spec.classes {
            let series = spec.base_series(k, m);
            let labels = vec![m; series.len()];
            windows.extend(make_windows(id, &series, &labels, spec.window_len, spec.stride, 0)?);
        }
        let drift = spec.shift.drift.as_ref().filter(|d| d.user as usize == k);
        if drift.is_some() {
            windows.shuffle(&mut spec.streams().rng("drift-order"));
        }
        for (pos, w) in windows.iter_mut().enumerate() {
            w.index = pos;
            let t = match drift {
                Some(d) if pos >= d.at_window => AffineTransform {
                    offset: d.offset,
                    scale: d.scale,
                },
                _ => transforms[&id],
            };
            t.apply(&mut w.data);
        }
        users.insert(id, windows);
        raw_counts.insert(id, spec.classes * spec.samples_per_class);
    }
    let dataset = Dataset {
        label_map: (0..spec.classes).map(|m| format!("class{m}")).collect(),
        window_len: spec.window_len,
        stride: spec.stride,
        users,
        raw_counts,
        pipeline: PipelineDescriptor {
            steps: vec![
                format!("{}(seed={})", PipelineDescriptor::SYNTHETIC, spec.seed),
                format!(
                    "{}(len={},stride={})",
                    PipelineDescriptor::WINDOWS,
                    spec.window_len,
                    spec.stride
                ),
            ],
        },
    };
    dataset.validate()?;
    Ok(dataset)
}
