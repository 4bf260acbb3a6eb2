//! Synthetic multimodal data with planted ground truth, pre-processing and
//! dataset files.

mod io;
mod preprocess;
mod synth;

pub use io::{
    load_dataset, read_packed_images, read_pgm, save_dataset, write_packed_images, write_pgm, ImageFormat,
    PACKED_IMAGE_MAGIC,
};
pub use preprocess::{minmax_apply, minmax_fit, resize_image, Imputer, Preprocessor, ScalerParams};
pub use synth::{generate_synthetic, planted_regions, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MILD: usize = 0;
pub const SEVERE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

/// One patient analogue.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: usize,
    pub group: usize,
    /// [`MILD`] or [`SEVERE`].
    pub label: usize,
    /// `None` marks a missing cell.
    pub tabular: Vec<Option<f64>>,
    /// Row-major `side x side` image in `[0, 1]`.
    pub image: Vec<f64>,
    /// Planted informative tabular features.
    pub tab_mask: Vec<bool>,
    /// Planted informative pixels.
    pub img_mask: Vec<bool>,
}

impl MultimodalSample {
    /// Tabular values; fails if any cell is still missing.
    pub fn tabular_values(&self) -> Result<Vec<f64>> {
        self.tabular
            .iter()
            .enumerate()
            .map(|(j, v)| v.ok_or_else(|| Error::invalid("sample", format!("sample {} feature {j} is missing", self.id))))
            .collect()
    }

    pub fn has_missing(&self) -> bool {
        self.tabular.iter().any(Option::is_none)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tabular_dim: usize,
    pub image_side: usize,
    pub kinds: Vec<FeatureKind>,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn groups(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.group).collect()
    }

    /// Samples at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Vec<MultimodalSample> {
        positions.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn position_of(&self, id: usize) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}
