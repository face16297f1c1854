use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Provenance, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Subset sizes as fractions of the whole pool.
///
/// The test subset is held out first; training and validation subsets are
/// then taken from the remaining pre-training pool, and what is left of the
/// pool becomes the pre-training subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub test: f64,
    pub train: f64,
    pub val: f64,
}

pub fn split_dataset(
    mut pool: Vec<Sample>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit> {
    let SplitFractions { test, train, val } = fractions;
    if [test, train, val].iter().any(|f| !(0.0..=1.0).contains(f))
        || test + train + val > 1.0 + 1e-12
    {
        return Err(Error::Config(format!(
            "invalid split fractions {fractions:?}"
        )));
    }
    let n = pool.len();
    let count = |f: f64| (f * n as f64).round() as usize;
    let (n_test, n_train, n_val) = (count(test), count(train), count(val));
    if n_test + n_train + n_val > n {
        return Err(Error::Config(format!(
            "fractions {fractions:?} overflow a pool of {n}"
        )));
    }
    let n_pre = n - n_test - n_train - n_val;
    for (name, k) in [
        ("test", n_test),
        ("train", n_train),
        ("val", n_val),
        ("pre", n_pre),
    ] {
        if k == 0 {
            return Err(Error::Config(format!(
                "split {fractions:?} of {n} samples leaves the {name} subset empty"
            )));
        }
    }

    pool.shuffle(&mut rng::stream(seed, Stream::Split));
    let mut rest = pool.split_off(n_test);
    let test_set = pool;
    let pre_pool_size = rest.len();
    let mut tail = rest.split_off(n_train);
    let train_set = rest;
    let pre_set = tail.split_off(n_val);
    let val_set = tail;
    Ok(DatasetSplit {
        train: train_set,
        val: val_set,
        pre: pre_set,
        test: test_set,
        provenance: Provenance {
            source: "split".into(),
            seed,
            pre_pool_size,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn pool(n: usize) -> Vec<Sample> {
        (0..n as u64)
            .map(|id| Sample {
                id,
                image: Tensor::scalar(id as f64),
                label: (id % 2) as usize,
            })
            .collect()
    }

    #[test]
    fn reproduces_small_annotation_protocol() {
        // 80/20 pre/test, then 8 training and 2 validation items from the pre pool.
        let f = SplitFractions {
            test: 0.2,
            train: 0.08,
            val: 0.02,
        };
        let s = split_dataset(pool(100), f, 1).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.provenance.pre_pool_size, 80);
        assert_eq!(s.pre.len(), 70);
        assert_eq!(s.test.len(), 20);
    }

    #[test]
    fn disjoint_and_seeded() {
        let f = SplitFractions {
            test: 0.25,
            train: 0.1,
            val: 0.1,
        };
        for seed in 0..20 {
            let s = split_dataset(pool(60), f, seed).unwrap();
            assert!(s.is_disjoint());
            assert_eq!(s.train.len() + s.val.len() + s.pre.len() + s.test.len(), 60);
            assert_eq!(s, split_dataset(pool(60), f, seed).unwrap());
        }
    }

    #[test]
    fn rejects_bad_fractions() {
        let f = SplitFractions {
            test: 0.6,
            train: 0.3,
            val: 0.2,
        };
        assert!(matches!(
            split_dataset(pool(10), f, 0),
            Err(Error::Config(_))
        ));
        let f = SplitFractions {
            test: 0.2,
            train: 0.01,
            val: 0.1,
        };
        assert!(matches!(
            split_dataset(pool(10), f, 0),
            Err(Error::Config(_))
        ));
    }
}
