use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, FeatureKind, MultimodalSample};

/// Shared latent factors driving the non-informative tabular features.
const FACTORS: usize = 2;
/// Feature-specific noise on non-informative features, relative to planted ones.
const IDIOSYNCRATIC: f64 = 0.3;
const BACKGROUND: f64 = 0.3;
/// Pixel-level noise per unit of `noise`.
const PIXEL_NOISE: f64 = 0.05;
/// Region brightness per unit of `separation` (and of per-sample `noise`).
const REGION_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub tabular_dim: usize,
    pub image_side: usize,
    /// Number of planted informative tabular features.
    pub informative_features: usize,
    /// The last `categorical_features` columns are 0/1 valued and always
    /// among the planted features.
    pub categorical_features: usize,
    /// Side of each square planted image region.
    pub region_size: usize,
    /// Class-mean shift of informative features, in units of `noise`.
    pub separation: f64,
    pub noise: f64,
    pub groups: usize,
    /// Explicit group sizes; overrides round-robin assignment.
    pub group_sizes: Option<Vec<usize>>,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            tabular_dim: 16,
            image_side: 32,
            informative_features: 4,
            categorical_features: 2,
            region_size: 8,
            separation: 1.3,
            noise: 1.0,
            groups: 6,
            group_sizes: None,
            missing_rate: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.tabular_dim == 0 || self.informative_features == 0 || self.informative_features >= self.tabular_dim {
            return bad(format!(
                "need 0 < informative_features ({}) < tabular_dim ({})",
                self.informative_features, self.tabular_dim
            ));
        }
        if self.categorical_features > self.informative_features {
            return bad(format!(
                "categorical_features ({}) exceeds informative_features ({})",
                self.categorical_features, self.informative_features
            ));
        }
        if self.region_size == 0 || 2 * self.region_size + 2 * (self.image_side / 8) > self.image_side {
            return bad(format!(
                "two {0}x{0} regions do not fit in a {1}x{1} image",
                self.region_size, self.image_side
            ));
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1]".into());
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("separation and noise must be finite and non-negative".into());
        }
        if self.groups == 0 {
            return bad("need at least one group".into());
        }
        if let Some(sizes) = &self.group_sizes {
            if sizes.len() != self.groups || sizes.iter().sum::<usize>() != self.n_samples {
                return bad(format!(
                    "group_sizes {sizes:?} must list {} groups summing to {}",
                    self.groups, self.n_samples
                ));
            }
        }
        Ok(())
    }
}

/// Top-left corners of the class-0 (left) and class-1 (right) planted
/// regions. Both are vertically centred, so a vertical flip maps each onto
/// itself.
pub fn planted_regions(side: usize, region: usize) -> [(usize, usize); 2] {
    let margin = side / 8;
    let far = side - margin - region;
    let mid = (side - region) / 2;
    [(mid, margin), (mid, far)]
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Generates a dataset whose classes differ only on the planted tabular
/// features and inside the two planted image regions.
///
/// Continuous features are `offset + scale * v`. On planted features
/// `v = noise * e + separation * (label - 1/2)`; elsewhere
/// `v = noise * (loadings . z + 0.3 * e)`, so the shared factors `z` make the
/// rest of the table nearly low-rank and independent of both the label and
/// the planted features. Categorical
/// features are Bernoulli draws whose rate depends on the class. Each image is a flat background plus pixel
/// noise, with the region of the sample's own class brightened by
/// `0.1 * (separation + noise * N(0, 1))` and the other region jittered by
/// `0.1 * noise * N(0, 1)`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.tabular_dim;
    let side = cfg.image_side;

    let continuous = d - cfg.categorical_features;
    let kinds: Vec<FeatureKind> = (0..d)
        .map(|j| if j < continuous { FeatureKind::Continuous } else { FeatureKind::Categorical })
        .collect();
    let mut informative: Vec<usize> =
        sample(&mut rng, continuous, cfg.informative_features - cfg.categorical_features).into_vec();
    informative.extend(continuous..d);
    let tab_mask: Vec<bool> = (0..d).map(|j| informative.contains(&j)).collect();

    let loading = Normal::new(0.0, 0.5).expect("valid normal");
    let offsets: Vec<f64> = (0..d).map(|_| rng.random_range(-20.0..20.0)).collect();
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..5.0)).collect();
    let loadings: Vec<[f64; FACTORS]> = (0..d)
        .map(|_| std::array::from_fn(|_| loading.sample(&mut rng)))
        .collect();

    let regions = planted_regions(side, cfg.region_size);
    let in_region = |r: usize, y: usize, x: usize| {
        let (ry, rx) = regions[r];
        (ry..ry + cfg.region_size).contains(&y) && (rx..rx + cfg.region_size).contains(&x)
    };
    let img_mask: Vec<bool> = (0..side * side)
        .map(|p| in_region(0, p / side, p % side) || in_region(1, p / side, p % side))
        .collect();

    let group_of = |i: usize| match &cfg.group_sizes {
        Some(sizes) => {
            let mut acc = 0;
            sizes
                .iter()
                .position(|&s| {
                    acc += s;
                    i < acc
                })
                .unwrap_or(0)
        }
        None => i % cfg.groups,
    };

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for id in 0..cfg.n_samples {
        let label = usize::from(rng.random_bool(0.5));
        let sign = label as f64 - 0.5;
        let z: [f64; FACTORS] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let mut tabular = Vec::with_capacity(d);
        for j in 0..d {
            let value = match kinds[j] {
                FeatureKind::Continuous => {
                    let e: f64 = rng.sample(StandardNormal);
                    let v = if tab_mask[j] {
                        cfg.noise * e + cfg.separation * sign
                    } else {
                        let shared: f64 = loadings[j].iter().zip(&z).map(|(l, f)| l * f).sum();
                        cfg.noise * (shared + IDIOSYNCRATIC * e)
                    };
                    offsets[j] + scales[j] * v
                }
                FeatureKind::Categorical => {
                    let logit = 2.0 * cfg.separation * sign / cfg.noise.max(1e-9);
                    f64::from(u8::from(rng.random_bool(logistic(logit))))
                }
            };
            let missing = rng.random_bool(cfg.missing_rate);
            tabular.push((!missing).then_some(value));
        }

        let own = REGION_GAIN * (cfg.separation + cfg.noise * rng.sample::<f64, _>(StandardNormal));
        let other = REGION_GAIN * cfg.noise * rng.sample::<f64, _>(StandardNormal);
        let mut image = Vec::with_capacity(side * side);
        for p in 0..side * side {
            let (y, x) = (p / side, p % side);
            let mut v = BACKGROUND + PIXEL_NOISE * cfg.noise * rng.sample::<f64, _>(StandardNormal);
            if in_region(label, y, x) {
                v += own;
            } else if in_region(1 - label, y, x) {
                v += other;
            }
            image.push(v.clamp(0.0, 1.0));
        }

        samples.push(MultimodalSample {
            id,
            group: group_of(id),
            label,
            tabular,
            image,
            tab_mask: tab_mask.clone(),
            img_mask: img_mask.clone(),
        });
    }
    Ok(Dataset {
        tabular_dim: d,
        image_side: side,
        kinds,
        samples,
    })
}
