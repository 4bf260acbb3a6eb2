//! Latent-shift counterfactuals: move the fused latent against the gradient
//! of the predicted-class posterior until the prediction flips, then compare
//! the shifted reconstructions with the original ones.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::write_pgm;
use crate::error::{Error, Result};
use crate::models::{argmax, LatentEmbedding, MultimodalModel};
use crate::numeric::{Scalar, Tape};

pub const DEFAULT_STEP: f64 = 10.0;
pub const DEFAULT_LAMBDA_MAX: f64 = 1e4;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub step: f64,
    pub lambda_max: f64,
    pub threshold: f64,
    /// Min-max normalize each importance vector before thresholding.
    pub normalize: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            lambda_max: DEFAULT_LAMBDA_MAX,
            threshold: DEFAULT_THRESHOLD,
            normalize: true,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config("explain: step must be positive".into()));
        }
        if !(self.lambda_max >= self.step && self.lambda_max.is_finite()) {
            return Err(Error::Config("explain: lambda_max must be at least one step".into()));
        }
        Ok(())
    }
}

/// Outcome of the λ search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlipSearch<S> {
    Flipped { lambda: S },
    NoFlip,
}

/// Runs `classify` on every row of a `[rows, width]` batch of latents.
fn classify_rows<S: Scalar>(model: &MultimodalModel<S>, rows: Vec<S>, count: usize) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let h = tape.input(vec![count, model.latent_width()], rows, false)?;
    let y = model.classify_on(&mut tape, &bound, h)?;
    Ok(tape.value(y).to_vec())
}

/// `∂ y[k] / ∂ h` with `k = argmax y`, where `y = classify(h)`.
pub fn latent_gradient<S: Scalar>(model: &MultimodalModel<S>, h: &[S]) -> Result<Vec<S>> {
    let width = model.latent_width();
    if h.len() != width {
        return Err(Error::shape("latent_gradient", &[h.len()], &[width]));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let hv = tape.input(vec![1, width], h.to_vec(), true)?;
    let y = model.classify_on(&mut tape, &bound, hv)?;
    let k = argmax(tape.value(y));
    let yk = tape.gather(y, &[k])?;
    let yk = tape.sum(yk)?;
    tape.backward(yk)?;
    let g = tape.grad(hv);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "latent_gradient" });
    }
    Ok(g)
}

/// The same gradient taken with respect to `h_t` and `h_i` as separate
/// leaves joined on the tape.
pub fn latent_gradient_parts<S: Scalar>(model: &MultimodalModel<S>, h_t: &[S], h_i: &[S]) -> Result<(Vec<S>, Vec<S>)> {
    let (n, m) = (model.tabular_width(), model.image_width());
    if h_t.len() != n || h_i.len() != m {
        return Err(Error::shape("latent_gradient_parts", &[h_t.len(), h_i.len()], &[n, m]));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let t = (n > 0).then(|| tape.input(vec![1, n], h_t.to_vec(), true)).transpose()?;
    let i = (m > 0).then(|| tape.input(vec![1, m], h_i.to_vec(), true)).transpose()?;
    let h = model.fuse_on(&mut tape, t, i)?;
    let y = model.classify_on(&mut tape, &bound, h)?;
    let k = argmax(tape.value(y));
    let yk = tape.gather(y, &[k])?;
    let yk = tape.sum(yk)?;
    tape.backward(yk)?;
    Ok((t.map(|v| tape.grad(v)).unwrap_or_default(), i.map(|v| tape.grad(v)).unwrap_or_default()))
}

/// `h - λ·g`. `λ = 0` returns `h` unchanged.
pub fn latent_shift<S: Scalar>(h: &[S], g: &[S], lambda: S) -> Result<Vec<S>> {
    if h.len() != g.len() {
        return Err(Error::shape("latent_shift", &[h.len()], &[g.len()]));
    }
    if !(lambda >= S::zero()) {
        return Err(Error::invalid("latent_shift", "lambda must be non-negative"));
    }
    if lambda == S::zero() {
        return Ok(h.to_vec());
    }
    Ok(h.iter().zip(g).map(|(&hv, &gv)| hv - lambda * gv).collect())
}

/// Smallest `λ ∈ {step, 2·step, …, λ_max}` at which the prediction for
/// `h - λ·g` differs from the prediction for `h`, with `g` taken once at `h`.
pub fn find_flip_lambda<S: Scalar>(model: &MultimodalModel<S>, h: &[S], step: f64, lambda_max: f64) -> Result<FlipSearch<S>> {
    let g = latent_gradient(model, h)?;
    search_flip(model, h, &g, step, lambda_max)
}

fn search_flip<S: Scalar>(model: &MultimodalModel<S>, h: &[S], g: &[S], step: f64, lambda_max: f64) -> Result<FlipSearch<S>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("find_flip_lambda", "step must be positive"));
    }
    let original = argmax(&model.classify(h)?);
    if g.iter().all(|v| *v == S::zero()) {
        return Ok(FlipSearch::NoFlip);
    }
    let steps = (lambda_max / step + 1e-9).floor() as usize;
    const CHUNK: usize = 64;
    let width = h.len();
    let classes = model.dims().classes;
    let mut k = 1;
    while k <= steps {
        let end = (k + CHUNK - 1).min(steps);
        let lambdas: Vec<S> = (k..=end).map(|j| S::of(j as f64 * step)).collect();
        let mut rows = Vec::with_capacity(lambdas.len() * width);
        for &l in &lambdas {
            rows.extend(latent_shift(h, g, l)?);
        }
        let probs = classify_rows(model, rows, lambdas.len())?;
        for (r, &l) in lambdas.iter().enumerate() {
            if argmax(&probs[r * classes..(r + 1) * classes]) != original {
                return Ok(FlipSearch::Flipped { lambda: l });
            }
        }
        k = end + 1;
    }
    Ok(FlipSearch::NoFlip)
}

/// `(‖h_T − h_T^λ‖₁ / n, ‖h_I − h_I^λ‖₁ / m)`; an absent modality scores 0.
pub fn modality_importance<S: Scalar>(h: &[S], h_lambda: &[S], n: usize, m: usize) -> Result<(S, S)> {
    if h.len() != n + m || h_lambda.len() != n + m {
        return Err(Error::shape("modality_importance", &[h.len(), h_lambda.len()], &[n + m]));
    }
    let l1 = |a: &[S], b: &[S], width: usize| {
        if width == 0 {
            S::zero()
        } else {
            a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<S>() / S::from_usize(width).unwrap()
        }
    };
    Ok((l1(&h[..n], &h_lambda[..n], n), l1(&h[n..], &h_lambda[n..], m)))
}

/// `|x̂ − x̂^λ|` elementwise.
pub fn feature_importance<S: Scalar>(recon: &[S], recon_lambda: &[S]) -> Result<Vec<S>> {
    if recon.len() != recon_lambda.len() {
        return Err(Error::shape("feature_importance", &[recon.len()], &[recon_lambda.len()]));
    }
    Ok(recon.iter().zip(recon_lambda).map(|(&a, &b)| (a - b).abs()).collect())
}

/// `value ≥ threshold`, after per-instance min-max scaling when `normalize`
/// is set. A constant vector normalizes to all zeros.
pub fn binarize_importance(importance: &[f64], threshold: f64, normalize: bool) -> Vec<bool> {
    if !normalize {
        return importance.iter().map(|&v| v >= threshold).collect();
    }
    let lo = importance.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = importance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![false; importance.len()];
    }
    importance.iter().map(|&v| (v - lo) / (hi - lo) >= threshold).collect()
}

/// Shifted latents, prediction and reconstructions at one λ.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftResult<S> {
    pub lambda: S,
    pub latent: LatentEmbedding<S>,
    pub y: Vec<S>,
    pub recon_t: Vec<S>,
    pub recon_i: Vec<S>,
}

pub fn shift_and_decode<S: Scalar>(
    model: &MultimodalModel<S>,
    latent: &LatentEmbedding<S>,
    g: &[S],
    lambda: S,
) -> Result<ShiftResult<S>> {
    let h = latent_shift(&latent.h, g, lambda)?;
    let shifted = LatentEmbedding::split(&h, model.tabular_width());
    let y = model.classify(&shifted.h)?;
    let (recon_t, recon_i) = model.decode(&shifted)?;
    Ok(ShiftResult {
        lambda,
        latent: shifted,
        y,
        recon_t,
        recon_i,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMap<T> {
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMasks {
    pub tabular: Vec<u8>,
    pub image: ImageMap<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: usize,
    /// `λ*` when a flip was found, otherwise `λ_max`.
    pub lambda: f64,
    pub flip_found: bool,
    pub y: Vec<f64>,
    pub y_lambda: Vec<f64>,
    #[serde(rename = "delta_T")]
    pub delta_t: f64,
    #[serde(rename = "delta_I")]
    pub delta_i: f64,
    #[serde(rename = "deltahat_T")]
    pub deltahat_t: Vec<f64>,
    #[serde(rename = "deltahat_I")]
    pub deltahat_i: ImageMap<f64>,
    pub masks: ExplanationMasks,
}

impl Explanation {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn tabular_mask(&self) -> Vec<bool> {
        self.masks.tabular.iter().map(|&v| v == 1).collect()
    }

    pub fn image_mask(&self) -> Vec<bool> {
        self.masks.image.data.iter().map(|&v| v == 1).collect()
    }

    /// Writes `Δ̂_I` min-max stretched to `[0, 255]` as ASCII PGM.
    pub fn write_heatmap_pgm<W: Write>(&self, w: W) -> Result<()> {
        let d = &self.deltahat_i.data;
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let stretched: Vec<f64> = d.iter().map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect();
        write_pgm(w, self.deltahat_i.shape[0], &stretched)
    }

    /// `feature,importance,selected` rows for a bar chart of `Δ̂_T`.
    pub fn write_bar_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let wrap = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["feature", "importance", "selected"]).map_err(wrap)?;
        for (j, (v, m)) in self.deltahat_t.iter().zip(&self.masks.tabular).enumerate() {
            out.write_record([format!("f{j}"), v.to_string(), m.to_string()]).map_err(wrap)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn to_f64<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Full pipeline for one sample: encode, search λ*, decode the shifted
/// latents, and score modalities and features. Without a flip every
/// quantity is reported at `λ_max`.
pub fn explain_sample<S: Scalar>(
    model: &MultimodalModel<S>,
    sample_id: usize,
    x_t: &[S],
    x_i: &[S],
    cfg: &ExplainConfig,
) -> Result<Explanation> {
    cfg.validate()?;
    let latent = model.encode(x_t, x_i)?;
    let y = model.classify(&latent.h)?;
    let (recon_t, recon_i) = model.decode(&latent)?;
    let g = latent_gradient(model, &latent.h)?;
    let (lambda, flip_found) = match search_flip(model, &latent.h, &g, cfg.step, cfg.lambda_max)? {
        FlipSearch::Flipped { lambda } => (lambda, true),
        FlipSearch::NoFlip => (S::of(cfg.lambda_max), false),
    };
    let shifted = shift_and_decode(model, &latent, &g, lambda)?;
    let (n, m) = (model.tabular_width(), model.image_width());
    let (delta_t, delta_i) = modality_importance(&latent.h, &shifted.latent.h, n, m)?;
    let deltahat_t = to_f64(&feature_importance(&recon_t, &shifted.recon_t)?);
    let deltahat_i = to_f64(&feature_importance(&recon_i, &shifted.recon_i)?);
    let side = if recon_i.is_empty() { 0 } else { model.dims().image_side };
    let bits = |mask: Vec<bool>| mask.into_iter().map(u8::from).collect::<Vec<u8>>();
    Ok(Explanation {
        sample_id,
        lambda: lambda.as_f64(),
        flip_found,
        y: to_f64(&y),
        y_lambda: to_f64(&shifted.y),
        delta_t: delta_t.as_f64(),
        delta_i: delta_i.as_f64(),
        masks: ExplanationMasks {
            tabular: bits(binarize_importance(&deltahat_t, cfg.threshold, cfg.normalize)),
            image: ImageMap {
                shape: [side, side],
                data: bits(binarize_importance(&deltahat_i, cfg.threshold, cfg.normalize)),
            },
        },
        deltahat_t,
        deltahat_i: ImageMap {
            shape: [side, side],
            data: deltahat_i,
        },
    })
}

/// Reference attributions from input perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionImportance {
    /// `|Δ y[k]|` when feature `j` is replaced by its fill value.
    pub tabular: Vec<f64>,
    /// `|Δ y[k]|` when the patch covering each pixel is zeroed.
    pub image: Vec<f64>,
}

/// Occlusion attributions for the predicted class `k`: each tabular feature
/// is replaced by `tabular_fill[j]` (the training mean), and each `patch x
/// patch` image tile is zeroed.
pub fn occlusion_oracle<S: Scalar>(
    model: &MultimodalModel<S>,
    x_t: &[S],
    x_i: &[S],
    tabular_fill: &[f64],
    patch: usize,
) -> Result<OcclusionImportance> {
    let dims = model.dims();
    if patch == 0 {
        return Err(Error::invalid("occlusion_oracle", "patch must be positive"));
    }
    let probs = |t: &[S], i: &[S]| model.classify(&model.encode(t, i)?.h);
    let y = probs(x_t, x_i)?;
    let k = argmax(&y);
    let base = y[k].as_f64();
    let predict = |t: &[S], i: &[S]| -> Result<f64> { Ok(probs(t, i)?[k].as_f64()) };
    let mut tabular = Vec::new();
    if model.tabular_ae().is_some() {
        if tabular_fill.len() != x_t.len() {
            return Err(Error::shape("occlusion_oracle", &[tabular_fill.len()], &[x_t.len()]));
        }
        for j in 0..x_t.len() {
            let mut t = x_t.to_vec();
            t[j] = S::of(tabular_fill[j]);
            tabular.push((predict(&t, x_i)? - base).abs());
        }
    }
    let mut image = Vec::new();
    if model.conv_ae().is_some() {
        let side = dims.image_side;
        image = vec![0.0; side * side];
        for py in (0..side).step_by(patch) {
            for px in (0..side).step_by(patch) {
                let mut occluded = x_i.to_vec();
                for y in py..(py + patch).min(side) {
                    for x in px..(px + patch).min(side) {
                        occluded[y * side + x] = S::zero();
                    }
                }
                let d = (predict(x_t, &occluded)? - base).abs();
                for y in py..(py + patch).min(side) {
                    for x in px..(px + patch).min(side) {
                        image[y * side + x] = d;
                    }
                }
            }
        }
    }
    Ok(OcclusionImportance { tabular, image })
}

#[cfg(test)]
mod tests;
