//! Signal preprocessing and sliding windows.
//!
//! Each `(subject, activity)` recording is processed on its own, in the
//! fixed order resample, causal moving average, min-max scaling, windows.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ingest::GroupKey;
use crate::data::types::{Dataset, PipelineDescriptor, Sample, SubjectId, TimeSeries, Window};
use crate::error::{Error, Result};

pub const PERIOD_20HZ_NS: i64 = 50_000_000;

/// Linear interpolation onto an exact grid `t0 + k * period_ns`, stopping
/// at the last input timestamp.
pub fn resample(series: &TimeSeries, period_ns: i64) -> Result<TimeSeries> {
    if series.len() < 2 {
        return Err(Error::invalid(format!(
            "resampling needs at least 2 samples, got {}",
            series.len()
        )));
    }
    if period_ns <= 0 {
        return Err(Error::invalid("resampling period must be positive"));
    }
    let ts = &series.timestamps_ns;
    if ts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("timestamps must be strictly increasing"));
    }
    let (t0, t_last) = (ts[0], ts[ts.len() - 1]);
    let n_out = ((t_last - t0) / period_ns) as usize + 1;
    let mut out_t = Vec::with_capacity(n_out);
    let mut out_v = Vec::with_capacity(n_out);
    let mut j = 0;
    for k in 0..n_out {
        let t = t0 + k as i64 * period_ns;
        while j + 1 < ts.len() && ts[j + 1] <= t {
            j += 1;
        }
        let v = if ts[j] == t || j + 1 == ts.len() {
            series.values[j]
        } else {
            let frac = (t - ts[j]) as f64 / (ts[j + 1] - ts[j]) as f64;
            let (a, b) = (series.values[j], series.values[j + 1]);
            [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * frac)
        };
        out_t.push(t);
        out_v.push(v);
    }
    TimeSeries::new(out_t, out_v)
}

pub fn resample_20hz(series: &TimeSeries) -> Result<TimeSeries> {
    resample(series, PERIOD_20HZ_NS)
}

/// Causal moving average: `out[i]` is the mean of the last `width` inputs
/// up to and including `i` (fewer during warm-up).
pub fn moving_average(values: &[[f64; 3]], width: usize) -> Result<Vec<[f64; 3]>> {
    if values.is_empty() {
        return Err(Error::invalid("moving average of an empty series"));
    }
    if width == 0 {
        return Err(Error::invalid("moving average width must be >= 1"));
    }
    Ok((0..values.len())
        .map(|i| {
            let span = &values[i.saturating_sub(width - 1)..=i];
            let n = span.len() as f64;
            [0, 1, 2].map(|a| span.iter().map(|v| v[a]).sum::<f64>() / n)
        })
        .collect())
}

/// Clamps to `[lo, hi]` then maps linearly onto `[0, 1]`.
pub fn minmax_normalize(values: &[[f64; 3]], lo: f64, hi: f64) -> Result<Vec<[f64; 3]>> {
    check_range(lo, hi)?;
    Ok(values
        .iter()
        .map(|v| v.map(|x| (x.clamp(lo, hi) - lo) / (hi - lo)))
        .collect())
}

pub fn minmax_denormalize(values: &[[f64; 3]], lo: f64, hi: f64) -> Result<Vec<[f64; 3]>> {
    check_range(lo, hi)?;
    Ok(values.iter().map(|v| v.map(|u| lo + u * (hi - lo))).collect())
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if lo < hi && lo.is_finite() && hi.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("min-max range needs lo < hi, got [{lo}, {hi}]")))
    }
}

/// Number of windows of length `window_len` and stride `stride` in a
/// series of `len` samples.
pub fn window_count(len: usize, window_len: usize, stride: usize) -> usize {
    if len < window_len || window_len == 0 || stride == 0 {
        0
    } else {
        (len - window_len) / stride + 1
    }
}

/// Sliding windows over a labelled series. Each window takes the most
/// frequent label it covers, ties going to the label seen first.
pub fn make_windows(
    subject: SubjectId,
    values: &[[f64; 3]],
    labels: &[usize],
    window_len: usize,
    stride: usize,
    first_index: usize,
) -> Result<Vec<Window>> {
    if values.len() != labels.len() {
        return Err(Error::shape("labels", values.len(), labels.len()));
    }
    if window_len == 0 || stride == 0 {
        return Err(Error::invalid("window length and stride must be >= 1"));
    }
    if values.len() < window_len {
        return Err(Error::invalid(format!(
            "series of {} samples is shorter than the window length {window_len}",
            values.len()
        )));
    }
    let n = window_count(values.len(), window_len, stride);
    Ok((0..n)
        .map(|w| {
            let start = w * stride;
            let span = start..start + window_len;
            Window {
                subject,
                label: majority_label(&labels[span.clone()]),
                index: first_index + w,
                data: values[span].iter().flatten().copied().collect(),
            }
        })
        .collect())
}

fn majority_label(labels: &[usize]) -> usize {
    // (count, first position) per label
    let mut seen: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (pos, &l) in labels.iter().enumerate() {
        seen.entry(l).or_insert((0, pos)).0 += 1;
    }
    seen.into_iter()
        .max_by(|(_, (ca, pa)), (_, (cb, pb))| ca.cmp(cb).then(pb.cmp(pa)))
        .map(|(l, _)| l)
        .expect("non-empty window")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "samples")]
pub enum Truncate {
    None,
    /// Cut every recording to the shortest one.
    Balanced,
    /// Cut every recording to exactly this many samples, dropping shorter ones.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub period_ns: i64,
    pub filter_width: usize,
    pub lo: f64,
    pub hi: f64,
    pub window_len: usize,
    pub stride: usize,
    pub truncate: Truncate,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            period_ns: PERIOD_20HZ_NS,
            filter_width: 4,
            lo: -78.0,
            hi: 78.0,
            window_len: 40,
            stride: 20,
            truncate: Truncate::Balanced,
        }
    }
}

impl PipelineParams {
    pub fn descriptor(&self) -> PipelineDescriptor {
        PipelineDescriptor {
            steps: vec![
                format!("{}(period_ns={})", PipelineDescriptor::RESAMPLE, self.period_ns),
                format!("{}(width={})", PipelineDescriptor::MOVING_AVERAGE, self.filter_width),
                format!("{}(lo={},hi={})", PipelineDescriptor::MINMAX, self.lo, self.hi),
                format!(
                    "{}(len={},stride={},truncate={:?})",
                    PipelineDescriptor::WINDOWS,
                    self.window_len,
                    self.stride,
                    self.truncate
                ),
            ],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessReport {
    /// Recordings dropped, with the reason.
    pub dropped: Vec<(GroupKey, String)>,
    pub duplicate_timestamps: usize,
    pub truncated_len: Option<usize>,
}

/// Runs the full pipeline over ingested groups.
pub fn preprocess(
    groups: &BTreeMap<GroupKey, Vec<Sample>>,
    params: &PipelineParams,
) -> Result<(Dataset, PreprocessReport)> {
    check_range(params.lo, params.hi)?;
    let mut report = PreprocessReport::default();

    let filtered: Vec<(GroupKey, std::result::Result<Vec<[f64; 3]>, String>, usize)> = groups
        .par_iter()
        .map(|(key, samples)| {
            let (series, dups) = dedup_timestamps(samples);
            let processed = resample(&series, params.period_ns)
                .and_then(|r| moving_average(&r.values, params.filter_width))
                .and_then(|m| minmax_normalize(&m, params.lo, params.hi))
                .map_err(|e| e.to_string());
            (key.clone(), processed, dups)
        })
        .collect();

    let mut kept = Vec::new();
    for (key, processed, dups) in filtered {
        report.duplicate_timestamps += dups;
        match processed {
            Ok(v) => kept.push((key, v)),
            Err(reason) => report.dropped.push((key, reason)),
        }
    }

    let cut = match params.truncate {
        Truncate::None => None,
        Truncate::Balanced => kept.iter().map(|(_, v)| v.len()).min(),
        Truncate::Fixed(n) => Some(n),
    };
    report.truncated_len = cut;

    let mut recordings = Vec::new();
    for (key, mut values) in kept {
        if let Some(n) = cut {
            if values.len() < n {
                report
                    .dropped
                    .push((key, format!("{} samples, fewer than {n}", values.len())));
                continue;
            }
            values.truncate(n);
        }
        if values.len() < params.window_len {
            report.dropped.push((
                key,
                format!("{} samples, shorter than one window", values.len()),
            ));
            continue;
        }
        recordings.push((key, values));
    }
    if recordings.is_empty() {
        return Err(Error::Data("no recording survived preprocessing".into()));
    }

    let label_map: Vec<String> = recordings
        .iter()
        .map(|((_, a), _)| a.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut users: BTreeMap<SubjectId, Vec<Window>> = BTreeMap::new();
    let mut raw_counts: BTreeMap<SubjectId, usize> = BTreeMap::new();
    for ((subject, activity), values) in &recordings {
        let label = label_map.binary_search(activity).expect("label collected above");
        let out = users.entry(*subject).or_default();
        let ws = make_windows(
            *subject,
            values,
            &vec![label; values.len()],
            params.window_len,
            params.stride,
            out.len(),
        )?;
        out.extend(ws);
        *raw_counts.entry(*subject).or_default() += values.len();
    }

    let dataset = Dataset {
        label_map,
        window_len: params.window_len,
        stride: params.stride,
        users,
        raw_counts,
        pipeline: params.descriptor(),
    };
    dataset.validate()?;
    Ok((dataset, report))
}

fn dedup_timestamps(samples: &[Sample]) -> (TimeSeries, usize) {
    let mut series = TimeSeries::default();
    let mut dups = 0;
    for s in samples {
        if series.timestamps_ns.last() == Some(&s.timestamp_ns) {
            dups += 1;
            continue;
        }
        series.timestamps_ns.push(s.timestamp_ns);
        series.values.push(s.accel);
    }
    (series, dups)
}
