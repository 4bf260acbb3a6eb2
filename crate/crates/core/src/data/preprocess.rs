use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, FeatureKind, MultimodalSample};

/// Per-feature fill values fitted on a training split: the mean for
/// continuous features, the mode for categorical ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub fills: Vec<f64>,
}

impl Imputer {
    pub fn fit(train: &[MultimodalSample], kinds: &[FeatureKind]) -> Result<Self> {
        let fills = kinds
            .iter()
            .enumerate()
            .map(|(j, kind)| {
                let observed: Vec<f64> = train.iter().filter_map(|s| s.tabular[j]).collect();
                if observed.is_empty() {
                    return Err(Error::invalid("impute", format!("feature {j} is missing in every training sample")));
                }
                Ok(match kind {
                    FeatureKind::Continuous => observed.iter().sum::<f64>() / observed.len() as f64,
                    FeatureKind::Categorical => mode(&observed),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { fills })
    }

    pub fn apply(&self, sample: &mut MultimodalSample) {
        for (v, fill) in sample.tabular.iter_mut().zip(&self.fills) {
            if v.is_none() {
                *v = Some(*fill);
            }
        }
    }
}

/// Most frequent value; the smallest one wins ties.
fn mode(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut best, mut best_count) = (sorted[0], 0);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        if j > best_count {
            best = sorted[i];
            best_count = j;
        }
        i += j;
    }
    best
}

/// Per-feature training-split range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Fits per-column min and max over the rows of a training table.
pub fn minmax_fit(rows: &[Vec<f64>]) -> Result<ScalerParams> {
    let first = rows.first().ok_or_else(|| Error::invalid("minmax_fit", "empty table"))?;
    let mut min = first.clone();
    let mut max = first.clone();
    for row in rows {
        if row.len() != min.len() {
            return Err(Error::shape("minmax_fit", &[min.len()], &[row.len()]));
        }
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(ScalerParams { min, max })
}

/// `(x - min) / (max - min)` clamped to `[0, 1]`; constant features map to 0.
pub fn minmax_apply(row: &[f64], params: &ScalerParams) -> Vec<f64> {
    row.iter()
        .zip(params.min.iter().zip(&params.max))
        .map(|(&v, (&lo, &hi))| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

/// Bilinear resize of a square image with corner-aligned sampling.
pub fn resize_image(image: &[f64], target: usize) -> Result<Vec<f64>> {
    let side = (image.len() as f64).sqrt().round() as usize;
    if side * side != image.len() || side == 0 {
        return Err(Error::invalid("resize_image", format!("{} pixels is not a square image", image.len())));
    }
    if target == 0 {
        return Err(Error::invalid("resize_image", "target side must be positive"));
    }
    if target == side {
        return Ok(image.to_vec());
    }
    let scale = if target > 1 { (side - 1) as f64 / (target - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(target * target);
    for ty in 0..target {
        let sy = ty as f64 * scale;
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(side - 1);
        for tx in 0..target {
            let sx = tx as f64 * scale;
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(side - 1);
            let at = |y: usize, x: usize| image[y * side + x];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Imputer and scaler fitted on one training split, plus the image side the
/// model expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub imputer: Imputer,
    pub scaler: ScalerParams,
    pub image_side: usize,
}

impl Preprocessor {
    /// Fits on the samples at `train` positions only.
    pub fn fit(dataset: &Dataset, train: &[usize], image_side: usize) -> Result<Self> {
        let train_samples = dataset.select(train);
        let imputer = Imputer::fit(&train_samples, &dataset.kinds)?;
        let rows = train_samples
            .into_iter()
            .map(|mut s| {
                imputer.apply(&mut s);
                s.tabular_values()
            })
            .collect::<Result<Vec<_>>>()?;
        let scaler = minmax_fit(&rows)?;
        Ok(Self {
            imputer,
            scaler,
            image_side,
        })
    }

    pub fn apply(&self, sample: &MultimodalSample) -> Result<MultimodalSample> {
        let mut out = sample.clone();
        self.imputer.apply(&mut out);
        out.tabular = minmax_apply(&out.tabular_values()?, &self.scaler).into_iter().map(Some).collect();
        let side = (sample.image.len() as f64).sqrt().round() as usize;
        if side != self.image_side {
            out.image = resize_image(&sample.image, self.image_side)?;
            if sample.img_mask.len() == sample.image.len() {
                let m: Vec<f64> = sample.img_mask.iter().map(|&b| f64::from(u8::from(b))).collect();
                out.img_mask = resize_image(&m, self.image_side)?.into_iter().map(|v| v >= 0.5).collect();
            }
        }
        Ok(out)
    }

    pub fn apply_all(&self, samples: &[MultimodalSample]) -> Result<Vec<MultimodalSample>> {
        samples.iter().map(|s| self.apply(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(tab: Vec<Option<f64>>) -> MultimodalSample {
        MultimodalSample {
            id: 0,
            group: 0,
            label: 0,
            tab_mask: vec![false; tab.len()],
            tabular: tab,
            image: vec![0.0; 4],
            img_mask: vec![false; 4],
        }
    }

    #[test]
    fn no_missing_values_is_identity() {
        let train = vec![sample(vec![Some(1.0), Some(0.0)])];
        let imp = Imputer::fit(&train, &[FeatureKind::Continuous, FeatureKind::Categorical]).unwrap();
        let mut s = sample(vec![Some(4.0), Some(1.0)]);
        let before = s.clone();
        imp.apply(&mut s);
        assert_eq!(s, before);
    }

    #[test]
    fn continuous_mean_and_categorical_mode() {
        let train = vec![
            sample(vec![Some(1.0), Some(7.0)]),
            sample(vec![Some(2.0), Some(7.0)]),
            sample(vec![Some(3.0), Some(9.0)]),
        ];
        let imp = Imputer::fit(&train, &[FeatureKind::Continuous, FeatureKind::Categorical]).unwrap();
        let mut s = sample(vec![None, None]);
        imp.apply(&mut s);
        assert_eq!(s.tabular, vec![Some(2.0), Some(7.0)]);
    }

    #[test]
    fn entirely_missing_feature_is_an_error() {
        let train = vec![sample(vec![None]), sample(vec![None])];
        assert!(Imputer::fit(&train, &[FeatureKind::Continuous]).is_err());
    }

    #[test]
    fn minmax_examples() {
        let params = minmax_fit(&[vec![0.0, 3.0], vec![10.0, 3.0]]).unwrap();
        assert_eq!(minmax_apply(&[5.0, 3.0], &params), vec![0.5, 0.0]);
        assert_eq!(minmax_apply(&[12.0, 8.0], &params), vec![1.0, 0.0]);
        assert_eq!(minmax_apply(&[-4.0, 8.0], &params), vec![0.0, 0.0]);
    }

    #[test]
    fn resize_examples() {
        let img: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        assert_eq!(resize_image(&img, 3).unwrap(), img);
        assert!(resize_image(&[0.4; 16], 7).unwrap().iter().all(|v| (v - 0.4).abs() < 1e-15));
        let up = resize_image(&[0.0, 1.0, 1.0, 0.0], 3).unwrap();
        assert_eq!(up[4], 0.5);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[2], 1.0);
        assert!(resize_image(&[0.0; 6], 3).is_err());
    }

    #[test]
    fn scaler_ignores_non_training_rows() {
        let ds = Dataset {
            tabular_dim: 1,
            image_side: 2,
            kinds: vec![FeatureKind::Continuous],
            samples: vec![sample(vec![Some(0.0)]), sample(vec![Some(10.0)]), sample(vec![Some(99.0)])],
        };
        let p = Preprocessor::fit(&ds, &[0, 1], 2).unwrap();
        let mut perturbed = ds.clone();
        perturbed.samples[2].tabular[0] = Some(-1e6);
        assert_eq!(Preprocessor::fit(&perturbed, &[0, 1], 2).unwrap(), p);
        let scaled = p.apply(&ds.samples[2]).unwrap();
        assert_eq!(scaled.tabular, vec![Some(1.0)]);
    }
}
