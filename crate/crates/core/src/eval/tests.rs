use super::*;
use crate::data::{generate_synthetic, Preprocessor, SynthConfig};
use crate::models::{ArchConfig, Modality, ModelDims};

fn setup(modality: Modality) -> (MultimodalModel<f64>, Vec<MultimodalSample>) {
    let ds = generate_synthetic(&SynthConfig {
        n_samples: 12,
        tabular_dim: 6,
        image_side: 8,
        informative_features: 2,
        categorical_features: 1,
        region_size: 2,
        missing_rate: 0.0,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let samples = Preprocessor::fit(&ds, &all, 8).unwrap().apply_all(&ds.samples).unwrap();
    let dims = ModelDims {
        tabular_dim: 6,
        image_side: 8,
        tabular_latent: 3,
        image_latent: 4,
        classes: 2,
    };
    let arch = ArchConfig {
        ae_hidden: vec![8],
        cae_channels: [4, 4],
        classifier_hidden: vec![8],
        modality,
    };
    (MultimodalModel::new(dims, &arch, 1).unwrap(), samples)
}

fn fill() -> Vec<f64> {
    vec![0.5; 6]
}

fn opts() -> EvalOptions {
    EvalOptions {
        explain: ExplainConfig {
            lambda_max: 200.0,
            ..ExplainConfig::default()
        },
        occlusion_patch: 2,
    }
}

#[test]
fn perfect_predictor_scores_one() {
    let (m, test) = setup(Modality::Both);
    let mut evals = evaluate_samples(&m, &test, &fill(), &opts()).unwrap();
    for e in &mut evals {
        e.prediction = e.label;
    }
    let r = build_report(0, &m, &test, &evals).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!(r.sensitivity.is_none_or(|v| v == 1.0) && r.specificity.is_none_or(|v| v == 1.0));
}

#[test]
fn report_fields_are_in_range_and_schema_is_stable() {
    let (m, test) = setup(Modality::Both);
    let evals = evaluate_samples(&m, &test, &fill(), &opts()).unwrap();
    assert_eq!(evals.iter().map(|e| e.sample_id).collect::<Vec<_>>(), test.iter().map(|s| s.id).collect::<Vec<_>>());
    let r = build_report(4, &m, &test, &evals).unwrap();
    for v in [Some(r.accuracy), r.sensitivity, r.specificity, r.flip_rate, Some(r.iou_t.mean), Some(r.iou_i.mean)]
        .into_iter()
        .flatten()
    {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    for c in &r.comparators {
        if let Some(p) = c.p {
            assert!((0.0..=1.0).contains(&p));
        }
        if let Some(rho) = c.rho {
            assert!((-1.0..=1.0).contains(&rho));
        }
    }
    assert_eq!(r.tabular_mean_rank.len(), 6);
    assert_eq!(r.iou_t.n, test.len());

    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expected = vec![
        "accuracy", "comparators", "flip_rate", "fold", "iou_i", "iou_t", "mse_i", "mse_t", "n_test", "sensitivity",
        "specificity", "tabular_mean_rank",
    ];
    expected.sort_unstable();
    assert_eq!(keys, expected);
    let back: EvalReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, r);

    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &[r.clone(), r]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("fold,n_test,accuracy,"));
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    assert!(lines[1].starts_with("4,12,"));
}

#[test]
fn evaluation_is_deterministic() {
    let (m, test) = setup(Modality::Both);
    let a = evaluate_samples(&m, &test, &fill(), &opts()).unwrap();
    let b = evaluate_samples(&m, &test, &fill(), &opts()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unimodal_models_report_what_exists() {
    let (m, test) = setup(Modality::TabularOnly);
    let evals = evaluate_samples(&m, &test, &fill(), &opts()).unwrap();
    let r = build_report(0, &m, &test, &evals).unwrap();
    assert_eq!(r.iou_i.n, 0);
    assert!(r.mse_i.is_none());
    let modality = r.comparators.iter().find(|c| c.name == "modality").unwrap();
    assert_eq!((modality.n, modality.rho), (0, None));
}

#[test]
fn tabular_means_average_each_column() {
    let (_, samples) = setup(Modality::Both);
    let m = tabular_means(&samples[..2]).unwrap();
    for (j, v) in m.iter().enumerate() {
        let expected = 0.5 * (samples[0].tabular[j].unwrap() + samples[1].tabular[j].unwrap());
        assert!((v - expected).abs() < 1e-15);
    }
    assert!(tabular_means(&[]).is_err());
}

#[test]
fn summary_aggregates_folds() {
    let (m, test) = setup(Modality::Both);
    let evals = evaluate_samples(&m, &test, &fill(), &opts()).unwrap();
    let mut a = build_report(0, &m, &test, &evals).unwrap();
    let mut b = a.clone();
    a.accuracy = 0.5;
    b.accuracy = 1.0;
    b.fold = 1;
    let s = EvalSummary::new(vec![a, b]);
    assert_eq!(s.accuracy.mean, 0.75);
    assert_eq!(s.accuracy.n, 2);
    assert_eq!(s.folds.len(), 2);
}
