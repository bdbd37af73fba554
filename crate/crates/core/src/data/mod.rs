//! Two-view samples: synthesis, radiograph projection, augmentation and
//! file formats.

mod augment;
pub mod io;
mod synth;
mod volume;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

pub use augment::{augment, AugmentParams};
pub use synth::{pixel_mean_auroc, synth_dataset, two_view_oracle_auroc, SynthConfig};
pub use volume::{line_integral, min_max_normalize, parallel_project, Axis, Volume};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `H×W`, values in `[0, 1]`.
    pub frontal: Tensor<f32>,
    /// Same extents as `frontal`.
    pub lateral: Tensor<f32>,
    pub label: bool,
    pub subject_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Subject ids per split. Splits are by subject, so a subject's two views
/// always land together.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn ids_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn split_of(&self, subject: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.ids(s).iter().any(|id| id == subject))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fractions(&self) -> [f64; 3] {
        let n = self.len().max(1) as f64;
        Split::ALL.map(|s| self.ids(s).len() as f64 / n)
    }

    /// No subject may appear twice.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for id in self.ids(split) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidArgument(format!("subject {id} appears in more than one split")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub manifest: SplitManifest,
}

impl Dataset {
    /// Samples of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&LabeledSample> {
        let by_id: HashMap<&str, &LabeledSample> =
            self.samples.iter().map(|s| (s.subject_id.as_str(), s)).collect();
        self.manifest
            .ids(split)
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }
}
