use rand::seq::SliceRandom;

use super::features::LabeledSet;
use crate::error::{Error, Result};
use crate::seed;

/// Stratified shuffle split. `ratio` is the training fraction of each class.
pub fn split_train_val(set: &LabeledSet, ratio: f64, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if !(ratio < 1.0) {
        return Err(Error::InvalidArgument("empty validation".into()));
    }
    if !(ratio > 0.0) {
        return Err(Error::InvalidArgument("empty training".into()));
    }
    if set.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "too few samples for stratification: {}",
            set.len()
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, "split"));
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * ratio).round() as usize;
        if n_train == 0 || n_train == idx.len() {
            return Err(Error::InvalidArgument(format!(
                "too few samples for stratification: class {class} has {}",
                idx.len()
            )));
        }
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((set.subset(&train), set.subset(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::features::{FeatureVector, TokenRef};
    use crate::trace::NeuronId;

    fn balanced(n: usize) -> LabeledSet {
        LabeledSet {
            neuron_order: vec![NeuronId::new(0, 0)],
            features: (0..n)
                .map(|i| FeatureVector {
                    values: vec![i as f64],
                    token_ref: TokenRef {
                        sample_id: format!("s{i}"),
                        position: 0,
                    },
                })
                .collect(),
            labels: (0..n).map(|i| (i % 2) as u8).collect(),
        }
    }

    #[test]
    fn ninety_ten() {
        let set = balanced(100);
        let (tr, va) = split_train_val(&set, 0.9, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        assert_eq!(va.class_counts(), [5, 5]);
        let mut all: Vec<f64> = tr
            .features
            .iter()
            .chain(&va.features)
            .map(|f| f.values[0])
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..100).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic() {
        let set = balanced(50);
        assert_eq!(
            split_train_val(&set, 0.9, 9).unwrap(),
            split_train_val(&set, 0.9, 9).unwrap()
        );
        assert_ne!(
            split_train_val(&set, 0.9, 9).unwrap().1,
            split_train_val(&set, 0.9, 10).unwrap().1
        );
    }

    #[test]
    fn degenerate_ratios() {
        let set = balanced(100);
        let err = split_train_val(&set, 1.0, 1).unwrap_err();
        assert!(err.to_string().contains("empty validation"));
        assert!(split_train_val(&set, 0.0, 1).is_err());
        assert!(split_train_val(&balanced(8), 0.9, 1).is_err());
    }
}
