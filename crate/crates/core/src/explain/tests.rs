use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::{ArchConfig, Dense, MlpClassifier, Modality, ModelDims, TabularAe};
use crate::numeric::{finite_diff_gradient, Tensor};

fn dense(rows: usize, cols: usize, w: Vec<f64>, b: Vec<f64>) -> Dense<f64> {
    Dense::from_parts(Tensor::new(vec![rows, cols], w).unwrap(), Tensor::new(vec![cols], b).unwrap()).unwrap()
}

/// Tabular-only model: 3 features, latent `h = x[..2]`, logits `(w·h, −w·h)`.
fn linear_model(w: [f64; 2]) -> MultimodalModel<f64> {
    let dims = ModelDims {
        tabular_dim: 3,
        image_side: 8,
        tabular_latent: 2,
        image_latent: 0,
        classes: 2,
    };
    let enc = dense(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], vec![0.0; 2]);
    let dec = dense(2, 3, vec![1.0, 0.0, 0.5, 0.0, 1.0, -0.5], vec![0.0; 3]);
    let clf = dense(2, 2, vec![w[0], -w[0], w[1], -w[1]], vec![0.0; 2]);
    MultimodalModel::from_parts(
        dims,
        Some(TabularAe::from_layers(vec![enc], vec![dec]).unwrap()),
        None,
        MlpClassifier::from_layers(vec![clf]).unwrap(),
    )
    .unwrap()
}

fn random_model(seed: u64) -> MultimodalModel<f64> {
    let dims = ModelDims {
        tabular_dim: 6,
        image_side: 8,
        tabular_latent: 3,
        image_latent: 4,
        classes: 2,
    };
    let arch = ArchConfig {
        ae_hidden: vec![5],
        cae_channels: [2, 3],
        classifier_hidden: vec![6],
        modality: Modality::Both,
    };
    MultimodalModel::new(dims, &arch, seed).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    ((0..6).map(|_| rng.random()).collect(), (0..64).map(|_| rng.random()).collect())
}

#[test]
fn constant_classifier_has_zero_gradient_and_never_flips() {
    let model = linear_model([0.0, 0.0]);
    let h = [0.3, -1.2];
    assert_eq!(latent_gradient(&model, &h).unwrap(), vec![0.0, 0.0]);
    assert_eq!(find_flip_lambda(&model, &h, 10.0, 1e4).unwrap(), FlipSearch::NoFlip);
    let e = explain_sample(&model, 4, &[0.3, -1.2, 0.7], &[], &ExplainConfig::default()).unwrap();
    assert!(!e.flip_found);
    assert_eq!(e.lambda, DEFAULT_LAMBDA_MAX);
    assert_eq!((e.delta_t, e.delta_i), (0.0, 0.0));
}

#[test]
fn linear_classifier_gradient_matches_closed_form() {
    let w = [0.8, -0.3];
    let model = linear_model(w);
    let h = [0.5, 0.2];
    let z: f64 = w[0] * h[0] + w[1] * h[1];
    let y0 = 1.0 / (1.0 + (-2.0 * z).exp());
    assert!(y0 > 0.5);
    let g = latent_gradient(&model, &h).unwrap();
    for j in 0..2 {
        let expected = 2.0 * y0 * (1.0 - y0) * w[j];
        assert!((g[j] - expected).abs() < 1e-12, "{} vs {}", g[j], expected);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let model = random_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let (t, i) = random_input(&mut rng);
        let h = model.encode(&t, &i).unwrap().h;
        let k = argmax(&model.classify(&h).unwrap());
        let g = latent_gradient(&model, &h).unwrap();
        let x = Tensor::new(vec![h.len()], h.clone()).unwrap();
        let fd = finite_diff_gradient(|p: &Tensor<f64>| Ok(model.classify(p.data())?[k]), &x, 1e-5).unwrap();
        for (a, b) in g.iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }
}

#[test]
fn gradient_slices_match_per_modality_gradients() {
    let model = random_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let (t, i) = random_input(&mut rng);
        let lat = model.encode(&t, &i).unwrap();
        let g = latent_gradient(&model, &lat.h).unwrap();
        let (gt, gi) = latent_gradient_parts(&model, &lat.h_t, &lat.h_i).unwrap();
        let n = lat.h_t.len();
        for (a, b) in g[..n].iter().zip(&gt).chain(g[n..].iter().zip(&gi)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shift_examples() {
    assert_eq!(latent_shift(&[1.0, 2.0], &[0.5, -0.5], 2.0).unwrap(), vec![0.0, 3.0]);
    let h = [0.25, -3.5, 7.0];
    assert_eq!(latent_shift(&h, &[1.0, -2.0, 0.1], 0.0).unwrap(), h.to_vec());
    let g = [0.5, 0.25, -1.0];
    let (a, b) = (2.0, 6.0);
    let sa = latent_shift(&h, &g, a).unwrap();
    let sb = latent_shift(&h, &g, b).unwrap();
    let sab = latent_shift(&h, &g, a + b).unwrap();
    for j in 0..3 {
        assert_eq!(sa[j] + sb[j] - h[j], sab[j]);
    }
    assert!(latent_shift(&h, &g, -1.0).is_err());
    assert!(latent_shift(&h, &g[..2], 1.0).is_err());
}

#[test]
fn flip_search_brackets_the_closed_form_threshold() {
    // w·h = 30 saturates the softmax, so the step is scaled to put the
    // threshold inside the second grid cell.
    let w = [3.0, 4.0];
    let h = [6.0, 3.0];
    let model = linear_model(w);
    let g = latent_gradient(&model, &h).unwrap();
    let wh = w[0] * h[0] + w[1] * h[1];
    assert_eq!(wh, 30.0);
    let lambda_c = wh / (g[0] * w[0] + g[1] * w[1]);
    let step = lambda_c / 1.5;
    // Dense scan of the logit sign as an independent bracket.
    let flips_at = |l: f64| {
        let s = latent_shift(&h, &g, l).unwrap();
        w[0] * s[0] + w[1] * s[1] < 0.0
    };
    let first = (1..=400).map(|k| k as f64 * 0.01 * step).find(|&l| flips_at(l)).unwrap();
    assert!(first > step && first <= 2.0 * step);
    match find_flip_lambda(&model, &h, step, 100.0 * step).unwrap() {
        FlipSearch::Flipped { lambda } => assert_eq!(lambda, 2.0 * step),
        FlipSearch::NoFlip => panic!("expected a flip"),
    }
}

#[test]
fn found_lambda_is_minimal_on_the_grid() {
    let model = random_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut flipped = 0;
    for _ in 0..20 {
        let (t, i) = random_input(&mut rng);
        let h = model.encode(&t, &i).unwrap().h;
        let original = argmax(&model.classify(&h).unwrap());
        let g = latent_gradient(&model, &h).unwrap();
        if let FlipSearch::Flipped { lambda } = find_flip_lambda(&model, &h, 0.5, 1e3).unwrap() {
            flipped += 1;
            let at = argmax(&model.classify(&latent_shift(&h, &g, lambda).unwrap()).unwrap());
            let before = argmax(&model.classify(&latent_shift(&h, &g, lambda - 0.5).unwrap()).unwrap());
            assert_ne!(at, original);
            assert_eq!(before, original);
        }
    }
    assert!(flipped > 0);
}

#[test]
fn modality_importance_examples() {
    let (dt, di) = modality_importance(&[1.0, 1.0, 5.0], &[0.0, 2.0, 5.0], 2, 1).unwrap();
    assert_eq!((dt, di), (1.0, 0.0));
    let h = [0.2, -0.4, 1.0, 3.0];
    assert_eq!(modality_importance(&h, &h, 2, 2).unwrap(), (0.0, 0.0));
    let g = [0.25, 0.5, -1.0, 2.0];
    let one = latent_shift(&h, &g, 4.0).unwrap();
    let two = latent_shift(&h, &g, 8.0).unwrap();
    let (a, b) = modality_importance(&h, &one, 2, 2).unwrap();
    let (c, d) = modality_importance(&h, &two, 2, 2).unwrap();
    assert_eq!((2.0 * a, 2.0 * b), (c, d));
}

#[test]
fn feature_importance_examples() {
    let d = feature_importance::<f64>(&[0.2, 0.9], &[0.5, 0.9]).unwrap();
    assert!((d[0] - 0.3).abs() < 1e-15 && d[1] == 0.0);
    assert_eq!(feature_importance(&[0.4, 0.1], &[0.4, 0.1]).unwrap(), vec![0.0, 0.0]);
    let (a, b) = ([0.1, 0.7, 0.3], [0.6, 0.2, 0.3]);
    assert_eq!(feature_importance(&a, &b).unwrap(), feature_importance(&b, &a).unwrap());
    assert!(feature_importance(&a, &b[..2]).is_err());
}

#[test]
fn binarize_examples() {
    assert_eq!(binarize_importance(&[0.0, 1.0], 0.5, true), vec![false, true]);
    assert_eq!(binarize_importance(&[2.0, 4.0, 6.0], 0.5, true), vec![false, true, true]);
    assert_eq!(binarize_importance(&[3.0, 3.0, 3.0], 0.5, true), vec![false; 3]);
    assert_eq!(binarize_importance(&[0.2, 0.6, 4.0], 0.5, false), vec![false, true, true]);
}

#[test]
fn zero_shift_is_a_bitwise_identity() {
    let model = random_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let (t, i) = random_input(&mut rng);
        let lat = model.encode(&t, &i).unwrap();
        let g = latent_gradient(&model, &lat.h).unwrap();
        let s = shift_and_decode(&model, &lat, &g, 0.0).unwrap();
        let (rt, ri) = model.decode(&lat).unwrap();
        assert_eq!(s.latent, lat);
        assert_eq!(s.y, model.classify(&lat.h).unwrap());
        assert!(feature_importance(&rt, &s.recon_t).unwrap().iter().all(|v| *v == 0.0));
        assert!(feature_importance(&ri, &s.recon_i).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(modality_importance(&lat.h, &s.latent.h, 3, 4).unwrap(), (0.0, 0.0));
    }
}

#[test]
fn binary_flip_crosses_one_half() {
    let model = random_model(17);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ExplainConfig {
        step: 0.5,
        lambda_max: 1e3,
        ..ExplainConfig::default()
    };
    for id in 0..10 {
        let (t, i) = random_input(&mut rng);
        let e = explain_sample(&model, id, &t, &i, &cfg).unwrap();
        assert!(e.delta_t >= 0.0 && e.delta_i >= 0.0);
        assert!(e.deltahat_t.iter().chain(&e.deltahat_i.data).all(|v| *v >= 0.0));
        if e.flip_found {
            let k = argmax(&e.y);
            assert!(e.y[k] >= 0.5 && e.y_lambda[k] < 0.5);
            assert_ne!(argmax(&e.y_lambda), k);
        }
    }
}

#[test]
fn explanation_json_and_exports() {
    let model = random_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, i) = random_input(&mut rng);
    let e = explain_sample(&model, 42, &t, &i, &ExplainConfig::default()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&e.to_json().unwrap()).unwrap();
    for key in ["sample_id", "lambda", "flip_found", "y", "y_lambda", "delta_T", "delta_I", "deltahat_T", "deltahat_I", "masks"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["deltahat_I"]["shape"], serde_json::json!([8, 8]));
    let back: Explanation = serde_json::from_value(json).unwrap();
    assert_eq!(back, e);

    let mut pgm = Vec::new();
    e.write_heatmap_pgm(&mut pgm).unwrap();
    let (side, px) = crate::data::read_pgm(&pgm[..]).unwrap();
    assert_eq!(side, 8);
    assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
    let mut bars = Vec::new();
    e.write_bar_csv(&mut bars).unwrap();
    let text = String::from_utf8(bars).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with("feature,importance,selected\nf0,"));
}

#[test]
fn occlusion_oracle_on_constructed_models() {
    let tab_fill = [0.5; 3];
    let constant = linear_model([0.0, 0.0]);
    let occ = occlusion_oracle(&constant, &[0.1, 0.9, 0.4], &[], &tab_fill, 4).unwrap();
    assert!(occ.tabular.iter().all(|v| *v == 0.0));
    assert!(occ.image.is_empty());

    // Only feature 1 reaches the logits.
    let model = linear_model([0.0, 1.5]);
    let occ = occlusion_oracle(&model, &[0.1, 0.9, 0.4], &[], &tab_fill, 4).unwrap();
    assert_eq!(occ.tabular[0], 0.0);
    assert_eq!(occ.tabular[2], 0.0);
    assert!(occ.tabular[1] > 0.0);

    let both = random_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, i) = random_input(&mut rng);
    let occ = occlusion_oracle(&both, &t, &i, &[0.5; 6], 4).unwrap();
    assert_eq!(occ.image.len(), 64);
    // Each 4x4 tile carries one value.
    assert_eq!(occ.image[0], occ.image[3 * 8 + 3]);
    assert!(occ.image.iter().all(|v| *v >= 0.0));
    // A fill equal to the input changes nothing.
    let occ = occlusion_oracle(&both, &t, &i, &t, 4).unwrap();
    assert!(occ.tabular.iter().all(|v| *v == 0.0));
}

