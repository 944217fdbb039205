use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::WindowBatch;
use crate::error::{Error, Result};
use crate::ingest::MAX_REPETITION;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
#[derive(Default)]
pub enum FoldPlan {
    /// Leave one repetition out, for every repetition 1..=5.
    #[default]
    RepetitionCv,
    /// One seeded split holding out `test_fraction` of every class.
    Shuffled { test_fraction: f64, seed: u64 },
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_folds(batch: &WindowBatch, plan: &FoldPlan) -> Result<Vec<Fold>> {
    match *plan {
        FoldPlan::RepetitionCv => (1..=MAX_REPETITION)
            .map(|r| {
                let (test, train): (Vec<usize>, Vec<usize>) = (0..batch.len()).partition(|&i| batch.fold_key[i] == r);
                if test.is_empty() {
                    return Err(Error::Data(format!("repetition {r} has no windows")));
                }
                Ok(Fold {
                    name: format!("Fold{r}"),
                    train,
                    test,
                })
            })
            .collect(),
        FoldPlan::Shuffled { test_fraction, seed } => {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::Config(format!("test fraction must lie in (0, 1), got {test_fraction}")));
            }
            let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
            for (i, &l) in batch.labels.iter().enumerate() {
                by_class.entry(l).or_default().push(i);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for idx in by_class.values_mut() {
                idx.shuffle(&mut rng);
                let n_test = (idx.len() as f64 * test_fraction).round() as usize;
                test.extend_from_slice(&idx[..n_test]);
                train.extend_from_slice(&idx[n_test..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            if train.is_empty() || test.is_empty() {
                return Err(Error::Data("shuffled split left an empty side".into()));
            }
            Ok(vec![Fold {
                name: "Shuffled".into(),
                train,
                test,
            }])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(keys: Vec<u8>, labels: Vec<u8>) -> WindowBatch {
        let n = keys.len();
        WindowBatch {
            window_len: 1,
            n_horizontal: 1,
            n_vertical: 1,
            samples: vec![0.0; keys.len()],
            labels,
            fold_key: keys,
            starts: vec![0; n],
        }
    }

    #[test]
    fn repetition_folds_partition() {
        let keys: Vec<u8> = (0..50).map(|i| (i % 5 + 1) as u8).collect();
        let b = batch(keys.clone(), vec![1; 50]);
        let folds = make_folds(&b, &FoldPlan::RepetitionCv).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(folds[0].train.iter().all(|&i| keys[i] != 1));
    }

    #[test]
    fn missing_repetition_is_an_error() {
        let b = batch(vec![1, 2, 3, 4, 4], vec![1; 5]);
        assert!(make_folds(&b, &FoldPlan::RepetitionCv).is_err());
    }

    #[test]
    fn shuffled_is_stratified_and_seeded() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 4 + 1) as u8).collect();
        let b = batch(vec![1; 100], labels.clone());
        let plan = FoldPlan::Shuffled { test_fraction: 0.2, seed: 3 };
        let f = make_folds(&b, &plan).unwrap();
        assert_eq!(f, make_folds(&b, &plan).unwrap());
        for c in 1..=4 {
            assert_eq!(f[0].test.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
    }
}
