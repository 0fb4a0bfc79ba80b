//! Uniform triplet sampling for contrastive pretraining.

use super::ImageRecord;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Samples one (anchor, positive, negative) index triple per record, in
/// record order. The positive is uniform over same-class records excluding
/// the anchor; the negative is uniform over all records of other classes.
/// Anchors whose class has a single member are skipped with a warning.
pub fn sample_triplet_indices(
    records: &[ImageRecord],
    rng_seed: u64,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_class[r.label.index()].push(i);
    }
    let distinct = by_class.iter().filter(|c| !c.is_empty()).count();
    if distinct < 2 {
        return Err(Error::Validation(
            "triplet sampling needs at least two classes present".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut triples = Vec::with_capacity(records.len());
    for (anchor, r) in records.iter().enumerate() {
        let same = &by_class[r.label.index()];
        if same.len() < 2 {
            log::warn!(
                "skipping anchor {anchor}: class {} has a single member",
                r.label
            );
            continue;
        }
        // uniform over same-class minus the anchor itself
        let pos_pool = same.len() - 1;
        let mut pick = rng.gen_range(0..pos_pool);
        let anchor_pos = same.iter().position(|&i| i == anchor).expect("anchor in its class");
        if pick >= anchor_pos {
            pick += 1;
        }
        let positive = same[pick];

        let neg_pool: usize = by_class
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != r.label.index())
            .map(|(_, v)| v.len())
            .sum();
        let mut neg_index = rng.gen_range(0..neg_pool);
        let mut negative = usize::MAX;
        for (c, members) in by_class.iter().enumerate() {
            if c == r.label.index() {
                continue;
            }
            if neg_index < members.len() {
                negative = members[neg_index];
                break;
            }
            neg_index -= members.len();
        }
        debug_assert_ne!(negative, usize::MAX);
        triples.push((anchor, positive, negative));
    }
    Ok(triples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassLabel, Split};
    use std::path::PathBuf;

    fn record(label: ClassLabel) -> ImageRecord {
        ImageRecord {
            image_path: PathBuf::from(format!("img_{}.png", rand::random::<u32>())),
            label,
            saliency_path: None,
            split: Split::Train,
        }
    }

    fn records_of(labels: &[usize]) -> Vec<ImageRecord> {
        labels
            .iter()
            .map(|&l| record(ClassLabel::from_index(l).unwrap()))
            .collect()
    }

    #[test]
    fn class_constraint_holds_for_every_triple() {
        let recs = records_of(&[0, 0, 1, 1]);
        let triples = sample_triplet_indices(&recs, 7).unwrap();
        assert_eq!(triples.len(), 4);
        for (a, p, n) in triples {
            assert_ne!(a, p);
            assert_eq!(recs[a].label, recs[p].label);
            assert_ne!(recs[a].label, recs[n].label);
        }
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let recs = records_of(&[2, 2, 2]);
        assert!(sample_triplet_indices(&recs, 0).is_err());
    }

    #[test]
    fn same_seed_gives_identical_triples() {
        let recs = records_of(&[0, 1, 2, 0, 1, 2, 0, 1]);
        let t1 = sample_triplet_indices(&recs, 42).unwrap();
        let t2 = sample_triplet_indices(&recs, 42).unwrap();
        assert_eq!(t1, t2);
        let t3 = sample_triplet_indices(&recs, 43).unwrap();
        assert!(t1 != t3 || t1.len() <= 2, "different seed should reshuffle");
    }

    #[test]
    fn singleton_class_anchor_is_skipped() {
        let recs = records_of(&[0, 0, 1]);
        let triples = sample_triplet_indices(&recs, 3).unwrap();
        // the lone class-1 record cannot anchor, the two class-0 ones can
        assert_eq!(triples.len(), 2);
        for (a, _, n) in triples {
            assert_eq!(recs[a].label.index(), 0);
            assert_eq!(recs[n].label.index(), 1);
        }
    }

    #[test]
    fn positives_cover_the_whole_class_across_seeds() {
        let recs = records_of(&[0, 0, 0, 0, 1]);
        let mut seen = std::collections::HashSet::new();
        for seed in 0..50 {
            for (a, p, _) in sample_triplet_indices(&recs, seed).unwrap() {
                if a == 0 {
                    seen.insert(p);
                }
            }
        }
        assert_eq!(seen, [1usize, 2, 3].into_iter().collect());
    }
}
