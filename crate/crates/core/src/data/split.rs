use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::VideoClip;
use crate::error::{Error, Result};

/// Unit the split assigns to a partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Grouping {
    /// All clips sharing a `source_id` land on the same side.
    #[default]
    BySource,
    /// Every clip is its own group, so augmented copies of one source may
    /// straddle the split.
    PerClip,
}

/// Stratified train/validation split. Each class sends `⌊f·nₖ⌋` or
/// `⌈f·nₖ⌉` of its groups to validation, with the rounding chosen so the
/// total is `round(f·n)` groups.
pub fn train_val_split(
    clips: Vec<VideoClip>,
    val_fraction: f64,
    seed: u64,
    grouping: Grouping,
) -> Result<(Vec<VideoClip>, Vec<VideoClip>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("validation fraction {val_fraction} must lie in (0, 1)")));
    }
    // class → group key → clip indices, all in first-seen order.
    let mut classes: BTreeMap<usize, Vec<(String, Vec<usize>)>> = BTreeMap::new();
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, clip) in clips.iter().enumerate() {
        let key = match grouping {
            Grouping::BySource => clip.source_id.clone(),
            Grouping::PerClip => format!("{i}"),
        };
        if let Some(&label) = owner.get(clip.source_id.as_str()) {
            if label != clip.label && grouping == Grouping::BySource {
                return Err(Error::invalid(format!(
                    "source {:?} carries labels {label} and {}",
                    clip.source_id, clip.label
                )));
            }
        }
        owner.insert(&clip.source_id, clip.label);
        let groups = classes.entry(clip.label).or_default();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    for (label, groups) in &classes {
        if groups.len() < 2 {
            return Err(Error::invalid(format!("class {label} has {} source clip(s), need at least 2", groups.len())));
        }
    }

    let total: usize = classes.values().map(Vec::len).sum();
    let target = (val_fraction * total as f64).round() as usize;
    let quotas: Vec<f64> = classes.values().map(|g| val_fraction * g.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().take(target.saturating_sub(assigned)) {
        counts[k] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; clips.len()];
    for (groups, &n_val) in classes.values_mut().zip(&counts) {
        groups.shuffle(&mut rng);
        for (_, members) in groups.iter().take(n_val) {
            for &i in members {
                is_val[i] = true;
            }
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (clip, v) in clips.into_iter().zip(is_val) {
        if v {
            val.push(clip)
        } else {
            train.push(clip)
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::augment_corpus;
    use crate::tensor::Tensor;
    use std::collections::BTreeSet;

    fn clip(label: usize, source: &str) -> VideoClip {
        VideoClip::new(Tensor::full(&[1, 4, 4, 1], 0.5).unwrap(), label, source).unwrap()
    }

    fn corpus(n: usize, classes: usize) -> Vec<VideoClip> {
        (0..n).map(|i| clip(i % classes, &format!("s{i}"))).collect()
    }

    #[test]
    fn ten_clips_split_eight_two() {
        for classes in [1, 2, 5] {
            let (train, val) = train_val_split(corpus(10, classes), 0.2, 0, Grouping::BySource).unwrap();
            assert_eq!((train.len(), val.len()), (8, 2), "{classes} classes");
        }
    }

    #[test]
    fn stratified_within_one() {
        let clips = corpus(97, 6);
        let (_, val) = train_val_split(clips.clone(), 0.2, 3, Grouping::BySource).unwrap();
        for k in 0..6 {
            let n = clips.iter().filter(|c| c.label == k).count() as f64;
            let v = val.iter().filter(|c| c.label == k).count() as f64;
            assert!((v - 0.2 * n).abs() <= 1.0, "class {k}: {v} vs {n}");
        }
    }

    #[test]
    fn augmented_copies_never_straddle() {
        let mut sources = Vec::new();
        for i in 0..30 {
            let base = VideoClip::new(Tensor::full(&[1, 30, 30, 1], 0.5).unwrap(), i % 3, format!("s{i}")).unwrap();
            sources.push(base);
        }
        let clips = augment_corpus(&sources, 5, 9).unwrap();
        assert_eq!(clips.len(), 180);
        let (train, val) = train_val_split(clips, 0.2, 1, Grouping::BySource).unwrap();
        let a: BTreeSet<_> = train.iter().map(|c| c.source_id.clone()).collect();
        let b: BTreeSet<_> = val.iter().map(|c| c.source_id.clone()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(val.len(), 6 * 6);
    }

    #[test]
    fn per_clip_grouping_ignores_sources() {
        let clips: Vec<_> = (0..20).map(|i| clip(i % 2, &format!("s{}", i / 10))).collect();
        let (train, val) = train_val_split(clips, 0.25, 0, Grouping::PerClip).unwrap();
        assert_eq!((train.len(), val.len()), (15, 5));
    }

    #[test]
    fn errors() {
        assert!(train_val_split(corpus(10, 2), 0.0, 0, Grouping::BySource).is_err());
        assert!(train_val_split(corpus(10, 2), 1.0, 0, Grouping::BySource).is_err());
        assert!(train_val_split(corpus(3, 2), 0.2, 0, Grouping::BySource).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = train_val_split(corpus(40, 4), 0.2, 5, Grouping::BySource).unwrap();
        let b = train_val_split(corpus(40, 4), 0.2, 5, Grouping::BySource).unwrap();
        assert_eq!(a, b);
    }
}
