use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::types::Window;
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Splits `windows` into `floor(fraction * n)` selected windows and the
/// rest, stratified by label.
///
/// Per-label quotas follow the largest-remainder rule; if the selection is
/// large enough to hold every label, each label gets at least one window.
/// Both sides keep the input order.
pub fn stratified_split<'a>(
    windows: &'a [Window],
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<&'a Window>, Vec<&'a Window>)> {
    let (a, b) = split_indices(windows, fraction, rng)?;
    Ok((a.iter().map(|&i| &windows[i]).collect(), b.iter().map(|&i| &windows[i]).collect()))
}

/// Positions of the two sides of [`stratified_split`].
pub fn split_indices(windows: &[Window], fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = windows.len();
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 || k == n {
        return Err(Error::invalid(format!(
            "splitting {n} windows at {fraction} leaves an empty side"
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_label.entry(w.label).or_default().push(i);
    }
    let labels: Vec<usize> = by_label.keys().copied().collect();
    let exact: Vec<f64> = labels.iter().map(|l| by_label[l].len() as f64 * k as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = k - quota.iter().sum::<usize>();
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[j] < by_label[&labels[j]].len() {
            quota[j] += 1;
            left -= 1;
        }
    }
    if k >= labels.len() {
        while let Some(empty) = quota.iter().position(|&q| q == 0) {
            let donor = (0..quota.len()).max_by_key(|&j| (quota[j], std::cmp::Reverse(j))).unwrap();
            quota[donor] -= 1;
            quota[empty] = 1;
        }
    }

    let mut selected = vec![false; n];
    for (j, label) in labels.iter().enumerate() {
        let mut idx = by_label[label].clone();
        idx.shuffle(rng);
        for &i in &idx[..quota[j]] {
            selected[i] = true;
        }
    }
    Ok((0..n).partition(|&i| selected[i]))
}
