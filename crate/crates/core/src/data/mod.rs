//! Datasets: synthetic shapes tasks with a controllable subset shift,
//! splitting, augmentation and IDX-file ingestion.

mod augment;
mod idx;
mod split;
mod synth;

pub use augment::{augment, flip_horizontal, flip_vertical, gamma_adjust, rotate90, AugmentPolicy};
pub use idx::{
    encode_idx, load_idx, parse_idx, read_cache, read_idx, write_cache, write_idx, IdxArray,
};
pub use split::{split_dataset, SplitFractions};
pub use synth::{gen_shapes_task, SubsetCounts, SyntheticTaskSpec, TaskKind, ORDINAL_GRADES};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// One image with its target and a dataset-wide unique id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    /// `1 × H × W` grayscale image.
    pub image: Tensor,
    /// Class index (binary tasks) or ordinal grade.
    pub label: usize,
}

/// Where a split came from and how large the pre-training pool was before
/// the training and validation subsets were carved out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    pub pre_pool_size: usize,
}

/// The four subsets used by a run. Subsets are disjoint by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub pre: Vec<Sample>,
    pub test: Vec<Sample>,
    pub provenance: Provenance,
}

/// Names of the subsets, in the order used for files and reports.
pub const SUBSET_NAMES: [&str; 4] = ["train", "val", "pre", "test"];

impl DatasetSplit {
    pub fn subsets(&self) -> [(&'static str, &[Sample]); 4] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("pre", &self.pre),
            ("test", &self.test),
        ]
    }

    /// True when no sample id occurs in two different subsets.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = std::collections::HashMap::new();
        for (i, (_, subset)) in self.subsets().iter().enumerate() {
            for s in subset.iter() {
                if let Some(&j) = seen.get(&s.id) {
                    if j != i {
                        return false;
                    }
                }
                seen.insert(s.id, i);
            }
        }
        true
    }
}
