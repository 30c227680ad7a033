use std::sync::OnceLock;

use autodiff::{ParamStore, Tensor};
use nerfrestore::codec::*;
use nerfrestore::image::Image;
use nerfrestore::metrics::psnr;
use nerfrestore::pipeline::reference_crops;
use nerfrestore::scene::*;

struct Trained {
    codec: Codec,
    store: ParamStore,
    curve: Vec<f64>,
    held_out: Vec<Tensor<f32>>,
}

fn config() -> CodecConfig {
    CodecConfig {
        base_width: 16,
        ..CodecConfig::default()
    }
}

fn views() -> ViewSet {
    let cfg = ViewSetConfig {
        n_train: 8,
        n_test: 2,
        resolution: 64,
        spp: 4,
        samples_per_ray: 96,
        ..Default::default()
    };
    generate_viewset(&AnalyticScene::default_scene(), &cfg, 3).unwrap()
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let vs = views();
        let crops = reference_crops(&vs, 512, 16, 0).unwrap();
        let held_out = reference_crops(&vs, 32, 16, 99).unwrap();
        let mut store = ParamStore::new();
        let mut codec = Codec::new(config(), &mut store, 0).unwrap();
        let tc = CodecTrainConfig {
            steps: 2500,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        };
        let curve = train_codec(&mut codec, &mut store, &crops, &tc, |_, _| {}).unwrap();
        Trained {
            codec,
            store,
            curve,
            held_out,
        }
    })
}

fn roundtrip(t: &Trained, x: &Tensor<f32>) -> Tensor<f32> {
    let s = x.shape().to_vec();
    let batch = x.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap();
    let z = t.codec.encode_tensor(&t.store, &batch).unwrap();
    t.codec
        .decode_tensor(&t.store, &z)
        .unwrap()
        .reshape(&s)
        .unwrap()
}

fn as_image(t: &Tensor<f32>) -> Image {
    let mut img = Image::from_tensor(t).unwrap();
    img.clamp01();
    img
}

#[test]
fn held_out_reconstruction_is_accurate() {
    let t = trained();
    let mean = t
        .held_out
        .iter()
        .map(|x| psnr(&as_image(&roundtrip(t, x)), &as_image(x)).unwrap())
        .sum::<f64>()
        / t.held_out.len() as f64;
    assert!(mean >= 25.0, "held-out reconstruction {mean:.2} dB");
}

#[test]
fn training_loss_decreases() {
    let c = &trained().curve;
    let head = c[..50].iter().sum::<f64>() / 50.0;
    let tail = c[c.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn flat_patch_is_easier_than_high_frequency() {
    let t = trained();
    let flat = Tensor::full(&[3, 16, 16], 0.5f32);
    let mut stripes = vec![0.0f32; 3 * 256];
    for c in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                stripes[c * 256 + y * 16 + x] = if (x + y) % 2 == 0 { 0.9 } else { 0.1 };
            }
        }
    }
    let stripes = Tensor::new(&[3, 16, 16], stripes).unwrap();
    let err = |x: &Tensor<f32>| {
        let y = roundtrip(t, x);
        x.data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / x.numel() as f64
    };
    assert!(err(&flat) < err(&stripes));
}

#[test]
fn scaled_latents_have_unit_spread() {
    let t = trained();
    let refs: Vec<&Tensor<f32>> = t.held_out.iter().collect();
    let z = t
        .codec
        .encode_tensor(&t.store, &stack(&refs).unwrap())
        .unwrap();
    let n = z.numel() as f64;
    let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (z
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    assert!((std - 1.0).abs() < 0.25, "latent std {std}");
    assert_eq!(z.shape(), &[32, 4, 4, 4]);
}

#[test]
fn fixed_seed_gives_identical_weights() {
    let vs = views();
    let crops = reference_crops(&vs, 256, 16, 1).unwrap();
    let run = || {
        let mut store = ParamStore::new();
        let mut codec = Codec::new(config(), &mut store, 7).unwrap();
        let tc = CodecTrainConfig {
            steps: 10,
            batch: 4,
            lr: 2e-3,
            seed: 7,
        };
        train_codec(&mut codec, &mut store, &crops, &tc, |_, _| {}).unwrap();
        let weights: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        (weights, codec.latent_scale)
    };
    assert_eq!(run(), run());
}

#[test]
fn too_few_patches_are_refused() {
    let mut store = ParamStore::new();
    let mut codec = Codec::new(config(), &mut store, 0).unwrap();
    let crops = vec![Tensor::zeros(&[3, 16, 16]); 10];
    let err = train_codec(
        &mut codec,
        &mut store,
        &crops,
        &CodecTrainConfig::default(),
        |_, _| {},
    );
    assert!(err.is_err());
}
