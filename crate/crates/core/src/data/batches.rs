use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::types::{DomainBatch, SubjectId, Window};
use crate::error::{Error, Result};

/// Splits every source's windows into random batches of exactly
/// `batch_size`, drawn without replacement. Windows left over after the
/// last full batch are skipped for this epoch. The returned schedule
/// interleaves sources in shuffled order.
pub fn make_domain_batches<'a, R: Rng + ?Sized>(
    sources: &[(SubjectId, &'a [Window])],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<DomainBatch<'a>>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch size must be > 1, got {batch_size}")));
    }
    if sources.is_empty() {
        return Err(Error::invalid("no source users"));
    }
    if let Some((s, ws)) = sources.iter().find(|(_, ws)| ws.len() < batch_size) {
        return Err(Error::invalid(format!(
            "batch size {batch_size} exceeds the {} windows of user {s}",
            ws.len()
        )));
    }

    let mut batches = Vec::new();
    for &(source, windows) in sources {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(rng);
        for (p, chunk) in order.chunks_exact(batch_size).enumerate() {
            batches.push(DomainBatch::new(
                source,
                p,
                chunk.iter().map(|&i| &windows[i]).collect(),
            )?);
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn windows(subject: u32, n: usize) -> Vec<Window> {
        (0..n)
            .map(|i| Window {
                subject: SubjectId(subject),
                label: i % 5,
                index: i,
                data: vec![i as f64; 6],
            })
            .collect()
    }

    #[test]
    fn wisdm_sized_users_give_five_pure_batches_each() {
        let a = windows(1, 885);
        let b = windows(2, 885);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_domain_batches(&[(SubjectId(1), &a), (SubjectId(2), &b)], 177, &mut rng).unwrap();
        assert_eq!(batches.len(), 10);
        for s in [1, 2] {
            assert_eq!(batches.iter().filter(|b| b.source() == SubjectId(s)).count(), 5);
        }
        for batch in &batches {
            assert_eq!(batch.len(), 177);
            assert!(batch.windows().iter().all(|w| w.subject == batch.source()));
        }
    }

    #[test]
    fn full_size_batch_is_a_permutation() {
        let a = windows(3, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = make_domain_batches(&[(SubjectId(3), &a)], 40, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        let mut idx: Vec<usize> = batches[0].windows().iter().map(|w| w.index).collect();
        idx.sort_unstable();
        assert_eq!(idx, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_union_is_the_source_minus_leftovers() {
        let a = windows(1, 103);
        let b = windows(2, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = make_domain_batches(&[(SubjectId(1), &a), (SubjectId(2), &b)], 10, &mut rng).unwrap();
        let mut per_source: BTreeMap<SubjectId, Vec<usize>> = BTreeMap::new();
        for batch in &batches {
            per_source
                .entry(batch.source())
                .or_default()
                .extend(batch.windows().iter().map(|w| w.index));
        }
        for (s, n) in [(SubjectId(1), 103), (SubjectId(2), 64)] {
            let mut got = per_source.remove(&s).unwrap();
            got.sort_unstable();
            let before = got.len();
            got.dedup();
            assert_eq!(got.len(), before, "duplicate window");
            assert_eq!(got.len(), n / 10 * 10);
            assert!(got.iter().all(|&i| i < n));
        }
    }

    #[test]
    fn oversize_batch_is_rejected() {
        let a = windows(1, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_domain_batches(&[(SubjectId(1), &a)], 51, &mut rng).is_err());
        assert!(make_domain_batches(&[(SubjectId(1), &a)], 1, &mut rng).is_err());
    }
}
