use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tensor(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, v).unwrap()
}

fn zeroed(mut model: MultimodalModel<f64>) -> MultimodalModel<f64> {
    for b in [Block::TabularAe, Block::ConvAe, Block::Classifier] {
        for p in model.block_params_mut(b) {
            let n = p.numel();
            p.assign(vec![0.0; n]).unwrap();
        }
    }
    model
}

fn small_dims() -> ModelDims {
    ModelDims {
        tabular_dim: 6,
        image_side: 8,
        tabular_latent: 3,
        image_latent: 4,
        classes: 2,
    }
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        ae_hidden: vec![5],
        cae_channels: [2, 3],
        classifier_hidden: vec![4],
        modality: Modality::Both,
    }
}

#[test]
fn zero_weights_encode_to_zero() {
    let model = zeroed(MultimodalModel::<f64>::new(small_dims(), &small_arch(), 1).unwrap());
    assert_eq!(model.ae_encode(&[0.3, 0.1, 0.9, 0.5, 0.2, 0.7]).unwrap(), vec![0.0; 3]);
    let img: Vec<f64> = (0..64).map(|i| (i % 7) as f64 / 7.0).collect();
    assert_eq!(model.cae_encode(&img).unwrap(), vec![0.0; 4]);
}

#[test]
fn zero_image_with_zero_biases_encodes_to_zero() {
    let model = MultimodalModel::<f64>::new(small_dims(), &small_arch(), 3).unwrap();
    assert_eq!(model.cae_encode(&[0.0; 64]).unwrap(), vec![0.0; 4]);
}

#[test]
fn identity_linear_encoder() {
    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let enc = Dense::from_parts(tensor(vec![3, 3], eye.clone()), tensor(vec![3], vec![0.0; 3])).unwrap();
    let dec = Dense::from_parts(tensor(vec![3, 3], eye), tensor(vec![3], vec![0.0; 3])).unwrap();
    let ae = TabularAe::from_layers(vec![enc], vec![dec]).unwrap();
    let mut tape = Tape::new();
    let vars = layers::bind_all(&mut tape, &ae.params(), false);
    let x = tape.input(vec![1, 3], vec![0.25, -1.5, 4.0], false).unwrap();
    let h = ae.encode_on(&mut tape, &vars, x).unwrap();
    assert_eq!(tape.value(h), &[0.25, -1.5, 4.0]);
}

#[test]
fn tabular_encoder_matches_matrix_chain() {
    let model = MultimodalModel::<f64>::new(small_dims(), &small_arch(), 11).unwrap();
    let ae = model.tabular_ae().unwrap();
    let x = vec![0.1, 0.9, 0.4, 0.3, 0.8, 0.05];
    let mut act = x.clone();
    for (i, layer) in ae.encoder.iter().enumerate() {
        let (nin, nout) = (layer.inputs(), layer.outputs());
        let w = layer.weight.data();
        let mut next = layer.bias.data().to_vec();
        for o in 0..nout {
            for k in 0..nin {
                next[o] += act[k] * w[k * nout + o];
            }
        }
        if i + 1 < ae.encoder.len() {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        act = next;
    }
    let h = model.ae_encode(&x).unwrap();
    for (a, b) in h.iter().zip(&act) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn strided_one_by_one_kernel_subsamples() {
    let enc = ConvLayer::from_parts(tensor(vec![1, 1, 1, 1], vec![1.0]), tensor(vec![1], vec![0.0]), 2, 0, 1).unwrap();
    let dec = ConvLayer::from_parts(tensor(vec![1, 1, 1, 1], vec![1.0]), tensor(vec![1], vec![0.0]), 1, 0, 2).unwrap();
    let cae = ConvAe::from_layers(vec![enc], vec![dec], 4).unwrap();
    assert_eq!(cae.latent_dim(), 4);
    let img: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
    let mut tape = Tape::new();
    let vars = layers::bind_all(&mut tape, &cae.params(), false);
    let x = tape.input(vec![1, 16], img.clone(), false).unwrap();
    let h = cae.encode_on(&mut tape, &vars, x).unwrap();
    assert_eq!(tape.value(h), &[img[0], img[2], img[8], img[10]]);
}

#[test]
fn conv_encoder_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let enc = ConvLayer::from_parts(tensor(vec![1, 1, 3, 3], w.clone()), tensor(vec![1], vec![0.2]), 2, 1, 1).unwrap();
    let dec = ConvLayer::from_parts(tensor(vec![1, 1, 3, 3], w.clone()), tensor(vec![1], vec![0.0]), 1, 1, 2).unwrap();
    let cae = ConvAe::from_layers(vec![enc], vec![dec], 4).unwrap();
    let img: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut expect = vec![0.2; 4];
    for oy in 0..2 {
        for ox in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    if (0..4).contains(&iy) && (0..4).contains(&ix) {
                        expect[oy * 2 + ox] += w[ky * 3 + kx] * img[(iy * 4 + ix) as usize];
                    }
                }
            }
        }
    }
    let mut tape = Tape::new();
    let vars = layers::bind_all(&mut tape, &cae.params(), false);
    let x = tape.input(vec![1, 16], img, false).unwrap();
    let h = cae.encode_on(&mut tape, &vars, x).unwrap();
    for (a, b) in tape.value(h).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn zero_weight_decoders_emit_bias() {
    let mut model = zeroed(MultimodalModel::<f64>::new(small_dims(), &small_arch(), 2).unwrap());
    let ae = model.tabular.as_mut().unwrap();
    let last = ae.decoder.last_mut().unwrap();
    let bias = vec![0.1, -0.2, 0.3, 0.4, 0.5, 0.6];
    last.bias.assign(bias.clone()).unwrap();
    let cae = model.image.as_mut().unwrap();
    cae.decoder.last_mut().unwrap().bias.assign(vec![0.7]).unwrap();
    assert_eq!(model.ae_decode(&[1.0, 2.0, 3.0]).unwrap(), bias);
    let img = model.cae_decode(&[1.0, -1.0, 0.5, 2.0]).unwrap();
    let s = 1.0 / (1.0 + (-0.7f64).exp());
    assert!(img.iter().all(|v| (v - s).abs() < 1e-15));
}

#[test]
fn classify_zero_logits_is_uniform() {
    let model = zeroed(MultimodalModel::<f64>::new(small_dims(), &small_arch(), 2).unwrap());
    assert_eq!(model.classify(&[0.3; 7]).unwrap(), vec![0.5, 0.5]);
}

#[test]
fn classify_sums_to_one() {
    let model = MultimodalModel::<f64>::new(small_dims(), &small_arch(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let h: Vec<f64> = (0..7).map(|_| rng.random_range(-50.0..50.0)).collect();
        let y = model.classify(&h).unwrap();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn linear_classifier_sign_rule() {
    // logits (w.h, -w.h): y0 = sigmoid(2 w.h) > 0.5 exactly when w.h > 0.
    let w = [0.5, -1.0, 2.0];
    let mut weight = Vec::new();
    for wi in w {
        weight.extend([wi, -wi]);
    }
    let layer = Dense::from_parts(tensor(vec![3, 2], weight), tensor(vec![2], vec![0.0; 2])).unwrap();
    let clf = MlpClassifier::from_layers(vec![layer]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let h: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let vars = layers::bind_all(&mut tape, &clf.params(), false);
        let hv = tape.input(vec![1, 3], h.clone(), false).unwrap();
        let y = clf.forward_on(&mut tape, &vars, hv).unwrap();
        let y0 = tape.value(y)[0];
        let dot: f64 = w.iter().zip(&h).map(|(a, b)| a * b).sum();
        let closed = 1.0 / (1.0 + (-2.0 * dot).exp());
        assert!((y0 - closed).abs() < 1e-12);
        assert_eq!(y0 > 0.5, dot > 0.0);
    }
}

#[test]
fn forward_is_the_composition_of_the_parts() {
    let model = MultimodalModel::<f64>::new(small_dims(), &small_arch(), 21).unwrap();
    let x_t = vec![0.2, 0.4, 0.6, 0.8, 1.0, 0.0];
    let x_i: Vec<f64> = (0..64).map(|i| ((i * 5) % 11) as f64 / 11.0).collect();
    let out = model.forward(&x_t, &x_i).unwrap();
    let h_t = model.ae_encode(&x_t).unwrap();
    let h_i = model.cae_encode(&x_i).unwrap();
    assert_eq!(out.latent.h_t, h_t);
    assert_eq!(out.latent.h_i, h_i);
    assert_eq!(out.latent.h, [h_t.clone(), h_i.clone()].concat());
    assert_eq!(out.recon_t, model.ae_decode(&h_t).unwrap());
    assert_eq!(out.recon_i, model.cae_decode(&h_i).unwrap());
    assert_eq!(out.probs, model.classify(&out.latent.h).unwrap());
    assert!(out.recon_i.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn batched_forward_matches_single_sample() {
    let model = MultimodalModel::<f64>::new(small_dims(), &small_arch(), 8).unwrap();
    let xs_t: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
    let xs_i: Vec<f64> = (0..128).map(|i| ((i * 3) % 17) as f64 / 17.0).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &[]);
    let xt = tape.input(vec![2, 6], xs_t.clone(), false).unwrap();
    let xi = tape.input(vec![2, 64], xs_i.clone(), false).unwrap();
    let want = Want {
        recon_t: true,
        recon_i: true,
        classify: true,
    };
    let out = model.forward_batch(&mut tape, &bound, Some(xt), Some(xi), want).unwrap();
    for b in 0..2 {
        let single = model.forward(&xs_t[b * 6..(b + 1) * 6], &xs_i[b * 64..(b + 1) * 64]).unwrap();
        assert_eq!(&tape.value(out.probs.unwrap())[b * 2..(b + 1) * 2], single.probs.as_slice());
        assert_eq!(&tape.value(out.recon_t.unwrap())[b * 6..(b + 1) * 6], single.recon_t.as_slice());
        assert_eq!(&tape.value(out.recon_i.unwrap())[b * 64..(b + 1) * 64], single.recon_i.as_slice());
    }
}

#[test]
fn wrong_lengths_are_rejected() {
    let model = MultimodalModel::<f64>::new(small_dims(), &small_arch(), 1).unwrap();
    assert!(model.ae_encode(&[0.0; 5]).is_err());
    assert!(model.cae_encode(&[0.0; 63]).is_err());
    assert!(model.ae_decode(&[0.0; 4]).is_err());
    assert!(model.cae_decode(&[0.0; 3]).is_err());
    assert!(model.classify(&[0.0; 6]).is_err());
}

#[test]
fn bottleneck_is_enforced() {
    let mut dims = small_dims();
    dims.tabular_latent = 6;
    assert!(MultimodalModel::<f64>::new(dims, &small_arch(), 1).is_err());
    let dims = ModelDims {
        image_side: 8,
        image_latent: 64,
        ..small_dims()
    };
    assert!(MultimodalModel::<f64>::new(dims, &small_arch(), 1).is_err());
}

#[test]
fn default_dims_build() {
    let model = MultimodalModel::<f64>::new(ModelDims::default(), &ArchConfig::default(), 0).unwrap();
    assert_eq!(model.latent_width(), 40);
    assert_eq!(model.classifier().input_dim(), 40);
    let f32_model = MultimodalModel::<f32>::new(ModelDims::default(), &ArchConfig::default(), 0).unwrap();
    let y = f32_model.classify(&[0.1; 40]).unwrap();
    assert!((y[0] + y[1] - 1.0).abs() < 1e-6);
}

#[test]
fn ablated_models_shrink_the_classifier() {
    let arch = ArchConfig {
        modality: Modality::ImageOnly,
        ..small_arch()
    };
    let model = MultimodalModel::<f64>::new(small_dims(), &arch, 1).unwrap();
    assert_eq!(model.latent_width(), 4);
    assert!(model.tabular_ae().is_none());
    let out = model.forward(&[], &[0.5; 64]).unwrap();
    assert!(out.recon_t.is_empty());
    assert_eq!(out.latent.h.len(), 4);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let model = MultimodalModel::<f64>::new(small_dims(), &small_arch(), 77).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    assert_eq!(&buf[..6], CHECKPOINT_MAGIC);
    let loaded: MultimodalModel<f64> = read_checkpoint(buf.as_slice()).unwrap();
    let x_t = vec![0.2, 0.4, 0.6, 0.8, 1.0, 0.0];
    let x_i: Vec<f64> = (0..64).map(|i| (i % 9) as f64 / 9.0).collect();
    let (a, b) = (model.forward(&x_t, &x_i).unwrap(), loaded.forward(&x_t, &x_i).unwrap());
    assert_eq!(a, b);
    let mut again = Vec::new();
    write_checkpoint(&loaded, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn checkpoint_errors_name_offsets() {
    let model = MultimodalModel::<f64>::new(small_dims(), &small_arch(), 77).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    let err = read_checkpoint::<f64, _>(bad.as_slice()).unwrap_err().to_string();
    assert!(err.contains("offset 0"), "{err}");
    let err = read_checkpoint::<f64, _>(&buf[..buf.len() - 3]).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
}
