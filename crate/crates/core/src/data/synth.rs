use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Provenance, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Disc (label 0) versus square (label 1).
    #[default]
    Binary,
    /// Discs only; the label is the radius binned into [`ORDINAL_GRADES`] grades.
    Ordinal,
}

/// Number of ordered grades of the ordinal task.
pub const ORDINAL_GRADES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetCounts {
    pub train: usize,
    pub val: usize,
    pub pre: usize,
    pub test: usize,
}

impl Default for SubsetCounts {
    fn default() -> Self {
        Self {
            train: 32,
            val: 64,
            pre: 4096,
            test: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub image_size: usize,
    /// Radius (discs) or half-width (squares) is uniform on this range.
    pub size_range: (f64, f64),
    /// Maximum jitter of the shape centre, in pixels.
    pub center_jitter: f64,
    /// Nuisance shift strength `s`: training images receive an intensity
    /// bias `U[0, s]`, every other subset `U[0, s/4]`.
    pub shift: f64,
    pub noise_std: f64,
    pub counts: SubsetCounts,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Binary,
            image_size: 16,
            size_range: (3.0, 5.0),
            center_jitter: 1.0,
            shift: 1.0,
            noise_std: 0.1,
            counts: SubsetCounts::default(),
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.counts;
        if c.train < 2 || c.val < 2 || c.pre < 1 || c.test < 2 {
            return Err(Error::Config(format!(
                "subset counts {c:?} below minimum (train ≥ 2, val ≥ 2, pre ≥ 1, test ≥ 2)"
            )));
        }
        if !(self.shift >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config(
                "shift and noise_std must be non-negative".into(),
            ));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("invalid size range {lo}..{hi}")));
        }
        if self.image_size < 8 || (self.image_size as f64) < 2.0 * (hi + self.center_jitter) {
            return Err(Error::Config(format!(
                "image size {} cannot hold shapes of size {hi} with jitter {}",
                self.image_size, self.center_jitter
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::Binary => 2,
            TaskKind::Ordinal => ORDINAL_GRADES,
        }
    }
}

/// Generates the four subsets of a shapes task.
///
/// The subset shift only moves image intensity, never geometry, so the
/// label-generating process is identical in every subset.
pub fn gen_shapes_task(spec: &SyntheticTaskSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let c = spec.counts;
    let mut next_id = 0u64;
    let mut subset = |index: u64, count: usize, max_bias: f64| -> Result<Vec<Sample>> {
        let mut rng = rng::substream(spec.seed, Stream::Data, index);
        (0..count)
            .map(|_| {
                let s = draw_sample(spec, max_bias, next_id, &mut rng);
                next_id += 1;
                s
            })
            .collect()
    };
    let train = subset(0, c.train, spec.shift)?;
    let val = subset(1, c.val, spec.shift / 4.0)?;
    let pre = subset(2, c.pre, spec.shift / 4.0)?;
    let test = subset(3, c.test, spec.shift / 4.0)?;
    Ok(DatasetSplit {
        train,
        val,
        pre,
        test,
        provenance: Provenance {
            source: format!("shapes-{:?}", spec.kind).to_lowercase(),
            seed: spec.seed,
            pre_pool_size: c.pre + c.train + c.val,
        },
    })
}

fn draw_sample(spec: &SyntheticTaskSpec, max_bias: f64, id: u64, rng: &mut Rng) -> Result<Sample> {
    let n = spec.image_size;
    let (lo, hi) = spec.size_range;
    let square = match spec.kind {
        TaskKind::Binary => rng.gen_bool(0.5),
        TaskKind::Ordinal => false,
    };
    let size = rng.gen_range(lo..=hi);
    let mid = (n as f64 - 1.0) / 2.0;
    let j = spec.center_jitter;
    let cy = mid + rng.gen_range(-j..=j);
    let cx = mid + rng.gen_range(-j..=j);
    let bias = rng.gen_range(0.0..=max_bias);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let inside = if square {
                dy.abs() <= size && dx.abs() <= size
            } else {
                dy * dy + dx * dx <= size * size
            };
            let base = if inside { 1.0 } else { 0.0 };
            data.push(base + bias + noise.sample(rng));
        }
    }
    let label = match spec.kind {
        TaskKind::Binary => usize::from(square),
        TaskKind::Ordinal => {
            let frac = (size - lo) / (hi - lo).max(f64::EPSILON);
            ((frac * ORDINAL_GRADES as f64) as usize).min(ORDINAL_GRADES - 1)
        }
    };
    Ok(Sample {
        id,
        image: Tensor::new(vec![1, n, n], data)?,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(shift: f64, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            shift,
            seed,
            counts: SubsetCounts {
                train: 40,
                val: 20,
                pre: 60,
                test: 30,
            },
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = gen_shapes_task(&small(1.0, 3)).unwrap();
        let b = gen_shapes_task(&small(1.0, 3)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_disjoint());
        assert_eq!(a.train.len(), 40);
        assert_ne!(a, gen_shapes_task(&small(1.0, 4)).unwrap());
    }

    #[test]
    fn shift_brightens_training_subset() {
        let split = gen_shapes_task(&small(2.0, 1)).unwrap();
        let mean =
            |s: &[Sample]| s.iter().map(|x| x.image.sum()).sum::<f64>() / (s.len() * 256) as f64;
        assert!(mean(&split.train) > mean(&split.pre) + 0.4);
    }

    #[test]
    fn ordinal_labels_are_grades() {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::Ordinal,
            ..small(0.5, 2)
        };
        let split = gen_shapes_task(&spec).unwrap();
        assert!(split.train.iter().all(|s| s.label < ORDINAL_GRADES));
        let distinct: std::collections::BTreeSet<_> = split.pre.iter().map(|s| s.label).collect();
        assert_eq!(distinct.len(), ORDINAL_GRADES);
    }

    #[test]
    fn rejects_small_counts() {
        let mut spec = small(1.0, 0);
        spec.counts.train = 1;
        assert!(matches!(gen_shapes_task(&spec), Err(Error::Config(_))));
    }
}
