use autodiff::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use nerfrestore::diffusion::*;
use nerfrestore::nn::mse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini() -> (Denoiser, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = UNetConfig {
        latent_channels: 2,
        channels: [4, 8, 8],
        temb_dim: 8,
        sft_sites: SftSites::EncoderAndDecoder,
    };
    let d = Denoiser::new(cfg, &mut store, 1).unwrap();
    (d, store)
}

fn is_sft(n: &str) -> bool {
    n.starts_with(SFT_PREFIX)
}

#[test]
fn noiseless_forward_process_scales_the_signal() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z0 = gaussian(&[2, 4, 4, 4], &mut rng);
    for t in [1, 10, 500, 1000] {
        let zt = q_sample(&z0, &[t], &Tensor::zeros(z0.shape()), &s).unwrap();
        let k = s.alpha_bar(t).sqrt();
        for (a, b) in z0.data().iter().zip(zt.data()) {
            assert!((*a as f64 * k - *b as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_process_preserves_unit_variance() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [1, 250, 600, 1000] {
        let z0 = gaussian(&[20_000], &mut rng);
        let eps = gaussian(&[20_000], &mut rng);
        let zt = q_sample(&z0, &[t], &eps, &s).unwrap();
        let n = zt.numel() as f64;
        let m = zt.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = zt
            .data()
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / n;
        assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
    }
}

#[test]
fn per_element_timesteps_are_respected() {
    let s = NoiseSchedule::default();
    let z0 = Tensor::ones(&[2, 1, 1, 1]);
    let zt = q_sample(&z0, &[1, 1000], &Tensor::zeros(&[2, 1, 1, 1]), &s).unwrap();
    assert!((zt.data()[0] as f64 - s.alpha_bar(1).sqrt()).abs() < 1e-6);
    assert!((zt.data()[1] as f64 - s.alpha_bar(1000).sqrt()).abs() < 1e-6);
    assert!(q_sample(&z0, &[0], &Tensor::zeros(&[2, 1, 1, 1]), &s).is_err());
    assert!(q_sample(&z0, &[1, 2, 3], &Tensor::zeros(&[2, 1, 1, 1]), &s).is_err());
}

#[test]
fn oracle_jump_recovers_the_clean_latent() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in [1usize, 50, 400, 999, 1000] {
        let z0 = gaussian(&[1, 4, 4, 4], &mut rng);
        let eps = gaussian(z0.shape(), &mut rng);
        let zt = q_sample(&z0, &[t], &eps, &s).unwrap();
        for kind in [SamplerKind::Ddim, SamplerKind::Ddpm] {
            let back = sampler_step(kind, &zt, &eps, t, 0, &mut rng, &s).unwrap();
            let err = z0
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            // f32 amplification of 1/sqrt(abar) at large t
            let tol = 1e-5 / s.alpha_bar(t).sqrt().min(1.0) as f32;
            assert!(err < tol.max(1e-5), "{kind} t={t} err={err}");
        }
    }
}

#[test]
fn oracle_predictor_samples_its_target() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = gaussian(&[1, 2, 4, 4], &mut rng);
    let tgt = target.clone();
    let sched = s.clone();
    // eps that is exactly consistent with `target` at every step
    let oracle =
        move |z: &Tensor<f32>, t: usize, _: &Tensor<f32>| -> nerfrestore::Result<Tensor<f32>> {
            let ab = sched.alpha_bar(t);
            let data = z
                .data()
                .iter()
                .zip(tgt.data())
                .map(|(&z, &x)| ((z as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32)
                .collect();
            Ok(Tensor::new(z.shape(), data)?)
        };
    let init = gaussian(target.shape(), &mut rng);
    let out = reverse_sample(&oracle, &target, init, SamplerKind::Ddim, 20, &mut rng, &s).unwrap();
    for (a, b) in out.data().iter().zip(target.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn epsilon_loss_of_oracle_and_zero_predictors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = gaussian(&[8, 4, 16, 16], &mut rng);
    let g = Graph::<f32>::new();
    let e = g.constant(&eps);
    assert_eq!(mse(&e, &e).unwrap().item(), 0.0);
    let zero = mse(&g.constant(&Tensor::zeros(eps.shape())), &e)
        .unwrap()
        .item();
    assert!((zero - 1.0).abs() < 0.05, "{zero}");
}

#[test]
fn sft_with_unit_scale_doubles_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Tensor::<f64>::randn(&[1, 3, 4, 4], 1.0, &mut rng);
    let g = Graph::<f64>::new();
    let fv = g.constant(&f);
    let out = sft_apply(
        &fv,
        &g.constant(&Tensor::ones(&[1, 3, 4, 4])),
        &g.constant(&Tensor::zeros(&[1, 3, 4, 4])),
    )
    .unwrap()
    .value();
    for (a, b) in out.data().iter().zip(f.data()) {
        assert_eq!(*a, 2.0 * b);
    }
    let bad = g.constant(&Tensor::zeros(&[1, 3, 2, 2]));
    assert!(sft_apply(&fv, &bad, &bad).is_err());
}

#[test]
fn stage1_loss_adds_weighted_diffusion_term() {
    let g = Graph::<f64>::new();
    let nerf = g.scalar(0.2);
    let diff = g.scalar(0.5);
    assert!((stage1_loss(&nerf, Some(&diff), 1.0).unwrap().item() - 0.7).abs() < 1e-15);
    assert!((stage1_loss(&nerf, Some(&diff), 0.0).unwrap().item() - 0.2).abs() < 1e-15);
    assert!((stage1_loss(&nerf, None, 1.0).unwrap().item() - 0.2).abs() < 1e-15);
}

#[test]
fn zero_initialized_sft_is_transparent() {
    let (d, store) = mini();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = gaussian(&[2, 2, 8, 8], &mut rng);
    let c = gaussian(&[2, 2, 8, 8], &mut rng);
    let with = FrozenDenoiser {
        model: &d,
        store: &store,
        conditioned: true,
    };
    let without = FrozenDenoiser {
        model: &d,
        store: &store,
        conditioned: false,
    };
    assert_eq!(
        with.predict(&z, 300, &c).unwrap(),
        without.predict(&z, 300, &c).unwrap()
    );
}

#[test]
fn sft_gradients_match_finite_differences() {
    let (d, store) = mini();
    let mut store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sft: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| is_sft(n))
        .map(|(id, _, _)| id)
        .collect();
    assert!(!sft.is_empty());
    // move off the zero init so every SFT path carries gradient
    for &id in &sft {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    let z = Tensor::<f64>::randn(&[1, 2, 8, 8], 1.0, &mut rng);
    let c = Tensor::<f64>::randn(&[1, 2, 8, 8], 1.0, &mut rng);
    let target = Tensor::<f64>::randn(&[1, 2, 8, 8], 1.0, &mut rng);
    fn loss<'g>(
        d: &Denoiser,
        s: &ParamStore<f64>,
        g: &'g Graph<f64>,
        train: bool,
        x: [&Tensor<f64>; 3],
    ) -> (autodiff::Var<'g, f64>, autodiff::Bound<'g, f64>) {
        let p = if train {
            s.bind(g, is_sft)
        } else {
            s.bind_frozen(g)
        };
        let cv = g.constant(x[1]);
        let out = d.predict(&p, &g.constant(x[0]), &[400], Some(&cv)).unwrap();
        let l = mse(&out, &g.constant(x[2])).unwrap();
        (l, p)
    }
    let x = [&z, &c, &target];
    let g = Graph::new();
    let (l, p) = loss(&d, &store, &g, true, x);
    g.backward(l).unwrap();
    let grads = p.grads();
    drop(p);

    let h = 1e-5;
    let mut checked = 0;
    for &id in &sft {
        let analytic = grads.get(id).expect("sft gradient").to_vec();
        let n = analytic.len();
        let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
        for _ in 0..20 {
            let j = rng.random_range(0..n);
            let orig = store.get(id).data()[j];
            let mut eval = |v: f64| {
                store.get_mut(id).data_mut()[j] = v;
                let g = Graph::new();
                loss(&d, &store, &g, false, x).0.item()
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            store.get_mut(id).data_mut()[j] = orig;
            diff2 += (analytic[j] - numeric).powi(2);
            an2 += analytic[j].powi(2);
            nu2 += numeric.powi(2);
        }
        let rel = diff2.sqrt() / an2.sqrt().max(nu2.sqrt()).max(1e-6);
        assert!(rel < 1e-4, "{}: {rel}", store.name(id));
        checked += 1;
    }
    assert_eq!(checked, sft.len());
}

#[test]
fn conditioning_becomes_live_with_training() {
    let (d, mut store) = mini();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = NoiseSchedule::default();
    let branch = |n: &str| n.starts_with(SFT_PREFIX) || n.starts_with(TIME_ENCODER_PREFIX);
    let mut adam = Adam::for_store(AdamConfig::with_lr(1e-2), &store, branch);
    let z_hq = gaussian(&[4, 2, 8, 8], &mut rng);
    let z_lq = z_hq.map(|v| 0.8 * v);
    for _ in 0..5 {
        let g = Graph::new();
        let p = store.bind(&g, branch);
        let l = diffusion_loss(&d, &p, &z_hq, Some(&z_lq), &mut rng, &s).unwrap();
        g.backward(l).unwrap();
        let mut grads = p.grads();
        drop(p);
        adam.step(&mut store, &mut grads).unwrap();
    }
    let with = FrozenDenoiser {
        model: &d,
        store: &store,
        conditioned: true,
    };
    let without = FrozenDenoiser {
        model: &d,
        store: &store,
        conditioned: false,
    };
    let zt = gaussian(z_hq.shape(), &mut rng);
    let a = with.predict(&zt, 500, &z_lq).unwrap();
    let b = without.predict(&zt, 500, &z_lq).unwrap();
    let gap = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max);
    assert!(gap > 1e-4, "{gap}");
}

#[test]
fn invalid_sampler_arguments_are_rejected() {
    let s = NoiseSchedule::default();
    let z = Tensor::zeros(&[1, 1, 4, 4]);
    assert!(ddim_step(&z, &z, 10, 10, &s).is_err());
    assert!(ddim_step(&z, &z, 1001, 0, &s).is_err());
    assert!(ddim_step(&z, &Tensor::zeros(&[1, 1, 2, 2]), 10, 0, &s).is_err());
    assert!("ddpm".parse::<SamplerKind>().is_ok());
    assert!("euler".parse::<SamplerKind>().is_err());
}

#[test]
fn encoder_starts_as_a_copy_of_the_contracting_path() {
    let (d, mut store) = mini();
    let enc: Vec<String> = store
        .iter()
        .filter(|(_, n, _)| n.starts_with(TIME_ENCODER_PREFIX))
        .map(|(_, n, _)| n.to_string())
        .collect();
    let counterpart = |n: &str| format!("{UNET_PREFIX}{}", &n[TIME_ENCODER_PREFIX.len()..]);
    let get = |s: &ParamStore, n: &str| s.get(s.find(n).unwrap()).clone();
    assert!(enc
        .iter()
        .any(|n| get(&store, n) != get(&store, &counterpart(n))));
    let before: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| !n.starts_with(TIME_ENCODER_PREFIX))
        .map(|(_, _, t)| t.clone())
        .collect();
    assert_eq!(d.init_encoder_from_unet(&mut store).unwrap(), enc.len());
    for n in &enc {
        assert_eq!(get(&store, n), get(&store, &counterpart(n)), "{n}");
    }
    let after: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| !n.starts_with(TIME_ENCODER_PREFIX))
        .map(|(_, _, t)| t.clone())
        .collect();
    assert_eq!(before, after);
}
