//! Classification metrics, agreement statistics, fold plans and per-fold
//! evaluation reports.

mod split;
mod stats;

pub use split::{kfold_split, loco_split, single_split, Fold, FoldPlan};
pub use stats::{
    classification_metrics, descending_ranks, iou, ln_gamma, paired_ttest, pearson, regularized_incomplete_beta,
    student_t_two_sided, ClassMetrics, MeanSd, TTest,
};

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::explain::{explain_sample, occlusion_oracle, ExplainConfig, Explanation, OcclusionImportance};
use crate::models::{argmax, MultimodalModel};
use crate::numeric::Scalar;
use crate::training::evaluate_losses;

/// Agreement between latent-shift importances and the occlusion reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparator {
    pub name: String,
    pub rho: Option<f64>,
    pub t: Option<f64>,
    pub p: Option<f64>,
    /// Number of samples that contributed.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub mse_t: Option<f64>,
    pub mse_i: Option<f64>,
    /// Share of correctly classified samples whose prediction flips.
    pub flip_rate: Option<f64>,
    pub iou_t: MeanSd,
    pub iou_i: MeanSd,
    /// Mean 1-based rank of each tabular feature's Δ̂_T over the test set.
    pub tabular_mean_rank: Vec<f64>,
    pub comparators: Vec<Comparator>,
}

/// Everything computed for one test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub sample_id: usize,
    pub label: usize,
    pub prediction: usize,
    pub explanation: Explanation,
    pub oracle: OcclusionImportance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub explain: ExplainConfig,
    /// Side of the square occlusion patch.
    pub occlusion_patch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            explain: ExplainConfig::default(),
            occlusion_patch: 4,
        }
    }
}

/// Per-feature means of preprocessed samples, the fill value for tabular
/// occlusion.
pub fn tabular_means(samples: &[MultimodalSample]) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| Error::invalid("tabular_means", "no samples"))?;
    let mut acc = vec![0.0; first.tabular.len()];
    for s in samples {
        for (a, v) in acc.iter_mut().zip(s.tabular_values()?) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|v| v / samples.len() as f64).collect())
}

/// Explains and occludes every sample; order follows `samples`. Runs on the
/// current rayon pool.
pub fn evaluate_samples<S: Scalar>(
    model: &MultimodalModel<S>,
    samples: &[MultimodalSample],
    tabular_fill: &[f64],
    opts: &EvalOptions,
) -> Result<Vec<SampleEval>> {
    opts.explain.validate()?;
    samples
        .par_iter()
        .map(|s| {
            let x_t: Vec<S> = s.tabular_values()?.into_iter().map(S::of).collect();
            let x_i: Vec<S> = s.image.iter().map(|&v| S::of(v)).collect();
            let explanation = explain_sample(model, s.id, &x_t, &x_i, &opts.explain)?;
            let oracle = occlusion_oracle(model, &x_t, &x_i, tabular_fill, opts.occlusion_patch)?;
            Ok(SampleEval {
                sample_id: s.id,
                label: s.label,
                prediction: argmax(&explanation.y),
                explanation,
                oracle,
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean per-sample correlation over the samples where it is defined.
fn per_sample_pearson(name: &str, pairs: impl Iterator<Item = (Vec<f64>, Vec<f64>)>) -> Comparator {
    let rhos: Vec<f64> = pairs.filter_map(|(a, b)| pearson(&a, &b).ok()).collect();
    Comparator {
        name: name.to_string(),
        rho: (!rhos.is_empty()).then(|| mean(&rhos)),
        t: None,
        p: None,
        n: rhos.len(),
    }
}

/// Per-sample tabular share of modality importance, from latent shift and
/// from occlusion, for samples where both are defined.
fn modality_shares(evals: &[SampleEval]) -> (Vec<f64>, Vec<f64>) {
    let share = |t: f64, i: f64| (t + i > 0.0).then(|| t / (t + i));
    evals
        .iter()
        .filter_map(|e| {
            let ours = share(e.explanation.delta_t, e.explanation.delta_i)?;
            let o = &e.oracle;
            if o.tabular.is_empty() || o.image.is_empty() {
                return None;
            }
            let theirs = share(mean(&o.tabular), mean(&o.image))?;
            Some((ours, theirs))
        })
        .unzip()
}

fn modality_comparator(evals: &[SampleEval]) -> Comparator {
    let (ours, theirs) = modality_shares(evals);
    let tt = paired_ttest(&ours, &theirs).ok();
    Comparator {
        name: "modality".to_string(),
        rho: pearson(&ours, &theirs).ok(),
        t: tt.map(|r| r.t),
        p: tt.map(|r| r.p),
        n: ours.len(),
    }
}

/// Builds the report for one fold from its test samples and their
/// evaluations (same order).
pub fn build_report<S: Scalar>(
    fold: usize,
    model: &MultimodalModel<S>,
    test: &[MultimodalSample],
    evals: &[SampleEval],
) -> Result<EvalReport> {
    if test.len() != evals.len() {
        return Err(Error::shape("build_report", &[test.len()], &[evals.len()]));
    }
    let predictions: Vec<usize> = evals.iter().map(|e| e.prediction).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let metrics = classification_metrics(&predictions, &labels)?;
    let losses = evaluate_losses(model, test)?;

    let correct: Vec<&SampleEval> = evals.iter().filter(|e| e.prediction == e.label).collect();
    let flip_rate =
        (!correct.is_empty()).then(|| correct.iter().filter(|e| e.explanation.flip_found).count() as f64 / correct.len() as f64);

    let mut iou_t = Vec::new();
    let mut iou_i = Vec::new();
    for (s, e) in test.iter().zip(evals) {
        if !e.explanation.deltahat_t.is_empty() {
            iou_t.push(iou(&e.explanation.tabular_mask(), &s.tab_mask)?);
        }
        if !e.explanation.deltahat_i.data.is_empty() {
            iou_i.push(iou(&e.explanation.image_mask(), &s.img_mask)?);
        }
    }

    let d_t = evals.first().map_or(0, |e| e.explanation.deltahat_t.len());
    let mut rank_sums = vec![0.0; d_t];
    for e in evals {
        for (acc, r) in rank_sums.iter_mut().zip(descending_ranks(&e.explanation.deltahat_t)) {
            *acc += r as f64;
        }
    }
    let tabular_mean_rank = rank_sums.iter().map(|s| s / evals.len() as f64).collect();

    let comparators = vec![
        modality_comparator(evals),
        per_sample_pearson(
            "tabular_features",
            evals.iter().map(|e| (e.explanation.deltahat_t.clone(), e.oracle.tabular.clone())),
        ),
        per_sample_pearson(
            "image_features",
            evals.iter().map(|e| (e.explanation.deltahat_i.data.clone(), e.oracle.image.clone())),
        ),
    ];

    Ok(EvalReport {
        fold,
        n_test: test.len(),
        accuracy: metrics.accuracy,
        sensitivity: metrics.sensitivity,
        specificity: metrics.specificity,
        mse_t: losses.l_t,
        mse_i: losses.l_i,
        flip_rate,
        iou_t: MeanSd::of(&iou_t),
        iou_i: MeanSd::of(&iou_i),
        tabular_mean_rank,
        comparators,
    })
}

/// Fold reports with mean ± sd across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub folds: Vec<EvalReport>,
    pub accuracy: MeanSd,
    pub sensitivity: MeanSd,
    pub specificity: MeanSd,
    pub mse_t: MeanSd,
    pub mse_i: MeanSd,
    pub iou_t: MeanSd,
    pub iou_i: MeanSd,
}

impl EvalSummary {
    pub fn new(folds: Vec<EvalReport>) -> Self {
        let over = |f: fn(&EvalReport) -> Option<f64>| MeanSd::of(&folds.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            accuracy: over(|r| Some(r.accuracy)),
            sensitivity: over(|r| r.sensitivity),
            specificity: over(|r| r.specificity),
            mse_t: over(|r| r.mse_t),
            mse_i: over(|r| r.mse_i),
            iou_t: over(|r| (r.iou_t.n > 0).then_some(r.iou_t.mean)),
            iou_i: over(|r| (r.iou_i.n > 0).then_some(r.iou_i.mean)),
            folds,
        }
    }
}

const COMPARATOR_NAMES: [&str; 3] = ["modality", "tabular_features", "image_features"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

/// One header line and one row per fold.
pub fn write_reports_csv<W: Write>(w: W, reports: &[EvalReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = [
        "fold", "n_test", "accuracy", "sensitivity", "specificity", "mse_t", "mse_i", "flip_rate", "iou_t_mean", "iou_t_sd",
        "iou_i_mean", "iou_i_sd",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for name in COMPARATOR_NAMES {
        header.extend(["rho", "t", "p"].iter().map(|s| format!("{name}_{s}")));
    }
    out.write_record(&header).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![
            r.fold.to_string(),
            r.n_test.to_string(),
            cell(Some(r.accuracy)),
            cell(r.sensitivity),
            cell(r.specificity),
            cell(r.mse_t),
            cell(r.mse_i),
            cell(r.flip_rate),
            cell((r.iou_t.n > 0).then_some(r.iou_t.mean)),
            cell((r.iou_t.n > 0).then_some(r.iou_t.sd)),
            cell((r.iou_i.n > 0).then_some(r.iou_i.mean)),
            cell((r.iou_i.n > 0).then_some(r.iou_i.sd)),
        ];
        for name in COMPARATOR_NAMES {
            let c = r.comparators.iter().find(|c| c.name == name);
            row.push(cell(c.and_then(|c| c.rho)));
            row.push(cell(c.and_then(|c| c.t)));
            row.push(cell(c.and_then(|c| c.p)));
        }
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format("report csv", offset, e.to_string())
}

#[cfg(test)]
mod tests;
