use rand::Rng as _;

use crate::autodiff::Tensor;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// The partner image of a training pair and whether it came from the
/// training subset (`t_a = 1`) or the pre-training pool (`t_a = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxSample {
    pub image: Tensor,
    pub t_a: u8,
    pub source_id: u64,
}

/// Draws the auxiliary partner for `train[index]`.
///
/// With probability one half the partner is another training image,
/// otherwise an image of the pre-training pool.
pub fn sample_auxiliary(
    index: usize,
    train: &[Sample],
    pre: &[Sample],
    rng: &mut Rng,
) -> Result<AuxSample> {
    let a: f64 = rng.gen();
    sample_auxiliary_at(a, index, train, pre, rng)
}

/// [`sample_auxiliary`] with the branch variable `a` supplied by the caller.
pub fn sample_auxiliary_at(
    a: f64,
    index: usize,
    train: &[Sample],
    pre: &[Sample],
    rng: &mut Rng,
) -> Result<AuxSample> {
    if index >= train.len() {
        return Err(Error::Contract(format!(
            "training index {index} outside a subset of {}",
            train.len()
        )));
    }
    let (sample, t_a) = if a <= 0.5 {
        if train.len() < 2 {
            return Err(Error::Contract(
                "a training partner distinct from the anchor needs at least 2 training images"
                    .into(),
            ));
        }
        let mut j = rng.gen_range(0..train.len() - 1);
        if j >= index {
            j += 1;
        }
        (&train[j], 1)
    } else {
        if pre.is_empty() {
            return Err(Error::Contract("the pre-training pool is empty".into()));
        }
        (&pre[rng.gen_range(0..pre.len())], 0)
    };
    Ok(AuxSample {
        image: sample.image.clone(),
        t_a,
        source_id: sample.id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn samples(ids: std::ops::Range<u64>) -> Vec<Sample> {
        ids.map(|id| Sample {
            id,
            image: Tensor::full(&[1, 2, 2], id as f64),
            label: 0,
        })
        .collect()
    }

    #[test]
    fn forced_branches() {
        let (train, pre) = (samples(0..4), samples(100..110));
        let mut rng = rng::stream(0, Stream::AuxSampling);
        for _ in 0..200 {
            let s = sample_auxiliary_at(0.3, 2, &train, &pre, &mut rng).unwrap();
            assert_eq!(s.t_a, 1);
            assert!(s.source_id < 4 && s.source_id != 2);
            let s = sample_auxiliary_at(0.9, 2, &train, &pre, &mut rng).unwrap();
            assert_eq!(s.t_a, 0);
            assert!(s.source_id >= 100);
        }
        // The threshold itself belongs to the training branch.
        assert_eq!(
            sample_auxiliary_at(0.5, 0, &train, &pre, &mut rng)
                .unwrap()
                .t_a,
            1
        );
    }

    #[test]
    fn same_subset_fraction_is_one_half() {
        let (train, pre) = (samples(0..8), samples(100..108));
        let mut rng = rng::stream(7, Stream::AuxSampling);
        let n = 100_000;
        let ones: usize = (0..n)
            .map(|i| sample_auxiliary(i % 8, &train, &pre, &mut rng).unwrap().t_a as usize)
            .sum();
        assert!((ones as f64 / n as f64 - 0.5).abs() <= 0.01);
    }

    #[test]
    fn single_training_image() {
        let (train, pre) = (samples(0..1), samples(100..102));
        let mut rng = rng::stream(0, Stream::AuxSampling);
        assert!(matches!(
            sample_auxiliary_at(0.2, 0, &train, &pre, &mut rng),
            Err(Error::Contract(_))
        ));
        assert_eq!(
            sample_auxiliary_at(0.7, 0, &train, &pre, &mut rng)
                .unwrap()
                .t_a,
            0
        );
    }
}
