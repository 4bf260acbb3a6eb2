use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{FoldScheme, Mode, RunConfig};
use crate::data::{generate_synthetic, load_dataset, save_dataset, Dataset, Preprocessor};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, evaluate_samples, kfold_split, loco_split, single_split, tabular_means, write_reports_csv, EvalReport, EvalSummary,
    Fold, FoldPlan,
};
use crate::explain::explain_sample;
use crate::models::{load_checkpoint, save_checkpoint, ArchConfig, ModelDims, MultimodalModel};
use crate::training::{one_stage_train, three_stage_train, StageWeights, TrainHistory};

const MANIFEST: &str = "manifest.json";

/// SHA-256 of every file under an output directory, keyed by relative path.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("walk stays under root");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if rel == MANIFEST {
            continue;
        }
        out.insert(rel, hex::encode(Sha256::digest(fs::read(&path)?)));
    }
    Ok(())
}

/// Hashes everything under `dir` and writes `manifest.json` there.
pub fn write_manifest(dir: &Path) -> Result<Manifest> {
    let mut files = BTreeMap::new();
    collect_files(dir, dir, &mut files)?;
    let manifest = Manifest { files };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Creates `dir`, refusing to touch a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", dir.display())));
        }
        if fs::read_dir(dir)?.next().is_some() {
            if !force {
                return Err(Error::Config(format!(
                    "{} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    let synth = cfg.synth_config()?;
    let ds = generate_synthetic(&synth)?;
    prepare_out_dir(out, force)?;
    save_dataset(&ds, out, cfg.image_format.unwrap_or_default())?;
    write_json(&out.join("synth.json"), &synth)?;
    eprintln!("synth: {} samples written to {}", ds.len(), out.display());
    write_manifest(out)
}

/// What `train` records next to the fold directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainRun {
    mode: Mode,
    folds: FoldScheme,
    seed: u64,
    dims: ModelDims,
    arch: ArchConfig,
    config: RunConfig,
}

/// Fold plan with sample ids in place of positions.
fn plan_to_ids(ds: &Dataset, plan: &FoldPlan) -> FoldPlan {
    let ids = |v: &[usize]| v.iter().map(|&i| ds.samples[i].id).collect();
    FoldPlan {
        folds: plan
            .folds
            .iter()
            .map(|f| Fold {
                train: ids(&f.train),
                val: ids(&f.val),
                test: ids(&f.test),
            })
            .collect(),
    }
}

fn positions(ds: &Dataset, ids: &[usize]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| ds.position_of(id).ok_or_else(|| Error::invalid("fold plan", format!("unknown sample id {id}"))))
        .collect()
}

fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold_{fold:02}"))
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn stage_name(w: StageWeights) -> &'static str {
    if w == StageWeights::TABULAR {
        "tabular"
    } else if w == StageWeights::IMAGE {
        "image"
    } else if w == StageWeights::JOINT {
        "joint"
    } else {
        "custom"
    }
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<Manifest> {
    let ds = load_dataset(data)?;
    if let Some(d) = cfg.tabular_dim.filter(|&d| d != ds.tabular_dim) {
        return Err(Error::Config(format!("config tabular_dim {d} does not match the data ({})", ds.tabular_dim)));
    }
    if let Some(s) = cfg.image_side.filter(|&s| s != ds.image_side) {
        return Err(Error::Config(format!("config image_side {s} does not match the data ({})", ds.image_side)));
    }
    let seed = cfg.resolved_seed()?;
    let train_cfg = cfg.train_config()?;
    let mode = cfg.mode.unwrap_or_default();
    let scheme = cfg.folds.unwrap_or_default();
    let defaults = ModelDims::default();
    let dims = ModelDims {
        tabular_dim: ds.tabular_dim,
        image_side: cfg.model_image_side.unwrap_or(ds.image_side),
        tabular_latent: cfg.tabular_latent.unwrap_or(defaults.tabular_latent),
        image_latent: cfg.image_latent.unwrap_or(defaults.image_latent),
        classes: defaults.classes,
    };
    let arch = ArchConfig {
        modality: mode.modality(),
        ..ArchConfig::default()
    };
    let labels = ds.labels();
    let plan = match scheme {
        FoldScheme::Single => single_split(&labels, seed)?,
        FoldScheme::Cv10 => kfold_split(&labels, 10, seed)?,
        FoldScheme::Loco => loco_split(&ds.groups(), &labels, seed)?,
    };
    prepare_out_dir(out, force)?;
    write_json(
        &out.join("run.json"),
        &TrainRun {
            mode,
            folds: scheme,
            seed,
            dims,
            arch: arch.clone(),
            // Worker count never changes results, so it is not recorded.
            config: RunConfig {
                workers: None,
                ..cfg.clone()
            },
        },
    )?;
    write_json(&out.join("folds.json"), &plan_to_ids(&ds, &plan))?;

    plan.folds.par_iter().enumerate().try_for_each(|(k, fold)| -> Result<()> {
        let dir = fold_dir(out, k);
        fs::create_dir_all(&dir)?;
        let pre = Preprocessor::fit(&ds, &fold.train, dims.image_side)?;
        let train = pre.apply_all(&ds.select(&fold.train))?;
        let val = pre.apply_all(&ds.select(&fold.val))?;
        let s = fold_seed(seed, k);
        let mut model = MultimodalModel::<f64>::new(dims, &arch, s)?;
        let fold_cfg = crate::training::TrainConfig { seed: s, ..train_cfg };
        eprintln!("train: fold {k}: {} train, {} val", train.len(), val.len());
        let histories: Vec<TrainHistory> = match mode {
            Mode::OneStage => vec![one_stage_train(&mut model, &train, &val, &fold_cfg)?],
            _ => three_stage_train(&mut model, &train, &val, &fold_cfg)?,
        };
        for (i, h) in histories.iter().enumerate() {
            let path = dir.join(format!("history_{}_{}.csv", i + 1, stage_name(h.weights)));
            let mut w = BufWriter::new(File::create(path)?);
            h.write_csv(&mut w)?;
            w.flush()?;
            eprintln!(
                "train: fold {k}: stage {} stopped at epoch {}, best {}",
                stage_name(h.weights),
                h.stopping_epoch,
                h.best_epoch
            );
        }
        save_checkpoint(&model, &dir.join("model.ckpt"))?;
        write_json(&dir.join("preprocess.json"), &pre)
    })?;
    write_manifest(out)
}

/// Which samples `explain` covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SampleFilter {
    All,
    /// The chosen fold's test set.
    Test,
    Ids(Vec<usize>),
}

impl FromStr for SampleFilter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(SampleFilter::All),
            "test" => Ok(SampleFilter::Test),
            _ => s
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad sample id {p:?}")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(SampleFilter::Ids),
        }
    }
}

struct LoadedFold {
    model: MultimodalModel<f64>,
    pre: Preprocessor,
}

fn load_fold(model_dir: &Path, fold: usize, ds: &Dataset) -> Result<LoadedFold> {
    let dir = fold_dir(model_dir, fold);
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} has no fold {fold}", model_dir.display())));
    }
    let model: MultimodalModel<f64> = load_checkpoint(&dir.join("model.ckpt"))?;
    let pre: Preprocessor = read_json(&dir.join("preprocess.json"))?;
    let dims = model.dims();
    if dims.tabular_dim != ds.tabular_dim || dims.image_side != pre.image_side {
        return Err(Error::Config(format!(
            "model expects {} features and {}px images; data has {} features, preprocessing yields {}px",
            dims.tabular_dim, dims.image_side, ds.tabular_dim, pre.image_side
        )));
    }
    Ok(LoadedFold { model, pre })
}

pub fn cmd_explain(
    cfg: &RunConfig,
    model_dir: &Path,
    data: &Path,
    out: &Path,
    filter: &SampleFilter,
    fold: usize,
    force: bool,
) -> Result<Manifest> {
    let opts = cfg.eval_options()?;
    let ds = load_dataset(data)?;
    let plan: FoldPlan = read_json(&model_dir.join("folds.json"))?;
    let lf = load_fold(model_dir, fold, &ds)?;
    let chosen: Vec<usize> = match filter {
        SampleFilter::All => (0..ds.len()).collect(),
        SampleFilter::Test => positions(&ds, &plan.folds[fold].test)?,
        SampleFilter::Ids(ids) => positions(&ds, ids)?,
    };
    prepare_out_dir(out, force)?;
    let samples = lf.pre.apply_all(&ds.select(&chosen))?;
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let e = explain_sample(&lf.model, s.id, &s.tabular_values()?, &s.image, &opts.explain)?;
        fs::write(out.join(format!("sample_{:05}.json", s.id)), e.to_json()? + "\n")?;
        if !e.deltahat_i.data.is_empty() {
            let mut w = BufWriter::new(File::create(out.join(format!("sample_{:05}_heatmap.pgm", s.id)))?);
            e.write_heatmap_pgm(&mut w)?;
            w.flush()?;
        }
        if !e.deltahat_t.is_empty() {
            let mut w = BufWriter::new(File::create(out.join(format!("sample_{:05}_bars.csv", s.id)))?);
            e.write_bar_csv(&mut w)?;
            w.flush()?;
        }
        Ok(())
    })?;
    eprintln!("explain: {} samples written to {}", samples.len(), out.display());
    write_manifest(out)
}

pub fn cmd_eval(cfg: &RunConfig, model_dir: &Path, data: &Path, out: &Path, force: bool) -> Result<(Manifest, EvalSummary)> {
    let opts = cfg.eval_options()?;
    let ds = load_dataset(data)?;
    let plan: FoldPlan = read_json(&model_dir.join("folds.json"))?;
    prepare_out_dir(out, force)?;
    let reports: Vec<EvalReport> = plan
        .folds
        .iter()
        .enumerate()
        .map(|(k, fold)| -> Result<EvalReport> {
            let lf = load_fold(model_dir, k, &ds)?;
            let test = lf.pre.apply_all(&ds.select(&positions(&ds, &fold.test)?))?;
            let fill = tabular_means(&lf.pre.apply_all(&ds.select(&positions(&ds, &fold.train)?))?)?;
            let evals = evaluate_samples(&lf.model, &test, &fill, &opts)?;
            let report = build_report(k, &lf.model, &test, &evals)?;
            write_json(&out.join(format!("fold_{k:02}.json")), &report)?;
            eprintln!("eval: fold {k}: accuracy {:.4}", report.accuracy);
            Ok(report)
        })
        .collect::<Result<_>>()?;
    let mut w = BufWriter::new(File::create(out.join("reports.csv"))?);
    write_reports_csv(&mut w, &reports)?;
    w.flush()?;
    drop(w);
    let summary = EvalSummary::new(reports);
    write_json(&out.join("summary.json"), &summary)?;
    Ok((write_manifest(out)?, summary))
}
