//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits nonzero if any criterion fails.
//!
//! Pass substrings as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- tiling color`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use autodiff::gradcheck::{check, standard_cases, GradReport};
use autodiff::{Graph, ParamStore, Tensor};
use common::ad;
use nerfrestore::checkpoint::Checkpoint;
use nerfrestore::config::RunConfig;
use nerfrestore::diffusion::*;
use nerfrestore::image::Image;
use nerfrestore::nn::{l1, mse};
use nerfrestore::pipeline::*;
use nerfrestore::radiance_field::{composite, grid_sample, reg_terms};
use nerfrestore::restoration::*;
use nerfrestore::scene::{generate_viewset, Vec3};
use nerfrestore::tiling::{default_sigma, make_layout, tiled_reverse_sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------------------
// 1. gradient checks

type DomainFn = for<'g> fn(
    &'g Graph<f64>,
    &[autodiff::Var<'g, f64>],
) -> autodiff::Result<autodiff::Var<'g, f64>>;

const POSITIONS: [Vec3; 6] = [
    [0.1, 0.2, 0.3],
    [0.55, 0.45, 0.9],
    [0.99, 0.01, 0.5],
    [0.33, 0.66, 0.12],
    [0.7, 0.8, 0.25],
    [0.5, 0.5, 0.5],
];
const DELTAS: [f64; 8] = [0.05, 0.1, 0.2, 0.07, 0.3, 0.15, 0.01, 0.25];

fn domain_cases() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), DomainFn)> {
    vec![
        (
            "grid_sample",
            vec![vec![4, 3, 3, 3]],
            (-1.0, 1.0),
            |_, x| ad(grid_sample(&x[0], 3, &POSITIONS)),
        ),
        (
            "composite",
            vec![vec![2, 4], vec![3, 2, 4]],
            (0.0, 2.0),
            |_, x| ad(composite(&x[0], &x[1], &DELTAS, [0.2, 0.4, 0.6])),
        ),
        ("reg_tv_l1", vec![vec![4, 3, 3, 3]], (-2.0, 2.0), |_, x| {
            let (tv, l) = ad(reg_terms(&x[0]))?;
            tv.add(&l)
        }),
        (
            "sft_apply",
            vec![vec![1, 2, 3, 3]; 3],
            (-1.0, 1.0),
            |_, x| ad(sft_apply(&x[0], &x[1], &x[2])),
        ),
        (
            "cfw_fuse",
            vec![vec![1, 2, 3, 3]; 2],
            (-1.0, 1.0),
            |_, x| ad(cfw_fuse(&x[0], &x[1], 0.7, |a, b| Ok(a.mul(b)?.tanh()))),
        ),
        ("mse", vec![vec![2, 3, 4]; 2], (-1.0, 1.0), |_, x| {
            ad(mse(&x[0], &x[1]))
        }),
        ("l1", vec![vec![2, 3, 4]; 2], (-1.0, 1.0), |_, x| {
            ad(l1(&x[0], &x[1]))
        }),
        (
            "generator_loss",
            vec![
                vec![1, 3, 4, 4],
                vec![1, 3, 4, 4],
                vec![1],
                vec![1, 1, 2, 2],
            ],
            (-1.0, 1.0),
            |_, x| {
                let proxy = x[2].sum();
                ad(generator_loss(
                    &x[0],
                    &x[1],
                    &proxy,
                    &x[3],
                    Stage2Weights::default(),
                ))
            },
        ),
        (
            "discriminator_loss",
            vec![vec![1, 1, 3, 3]; 2],
            (-3.0, 3.0),
            |_, x| ad(discriminator_loss(&x[0], &x[1])),
        ),
        ("stage1_loss", vec![vec![1], vec![1]], (0.0, 1.0), |_, x| {
            ad(stage1_loss(&x[0].sum(), Some(&x[1].sum()), 0.5))
        }),
    ]
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut record = |name: &str, r: GradReport| {
        let e = worst.entry(name.to_string()).or_insert(0.0);
        *e = e.max(r.max_relative_error());
    };
    for case in standard_cases() {
        for _ in 0..20 {
            record(
                case.name,
                case.run(&mut rng, 1e-5)
                    .map_err(|e| format!("{}: {e}", case.name))?,
            );
        }
    }
    for (name, shapes, (lo, hi), f) in domain_cases() {
        for _ in 0..20 {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| Tensor::uniform(s, lo, hi, &mut rng))
                .collect();
            record(
                name,
                check(&inputs, 1e-5, f).map_err(|e| format!("{name}: {e}"))?,
            );
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let (op, err) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k.clone(), *v))
        .unwrap();
    let failing: Vec<&String> = worst
        .iter()
        .filter(|(_, &e)| e >= 1e-4)
        .map(|(k, _)| k)
        .collect();
    ensure(
        failing.is_empty() && secs < 120.0,
        format!(
            "{} ops x 20 instances, worst relative error {err:.2e} ({op}), failing {failing:?}, {secs:.1}s",
            worst.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. tiling

fn pixelwise(z: &Tensor<f32>, t: usize, cond: &Tensor<f32>) -> nerfrestore::Result<Tensor<f32>> {
    let s = (t as f32 / 1000.0).sqrt();
    let data = z
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&a, &c)| (0.8 * a + 0.5 * c).sin() * s + 0.2 * a * c)
        .collect();
    Ok(Tensor::new(z.shape(), data)?)
}

fn tiling_oracle() -> Outcome {
    let t0 = Instant::now();
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cond = gaussian(&[1, 4, 32, 32], &mut rng);
    let init = gaussian(&[1, 4, 32, 32], &mut rng);
    let full = reverse_sample(
        &pixelwise,
        &cond,
        init.clone(),
        SamplerKind::Ddim,
        20,
        &mut rng,
        &sched,
    )
    .map_err(|e| e.to_string())?;
    let mut max_diff = 0.0f32;
    for (tile, stride) in [(8, 4), (16, 8), (12, 6)] {
        let l = make_layout(32, 32, tile, stride, default_sigma(tile)).unwrap();
        let tiled = tiled_reverse_sample(
            &pixelwise,
            &cond,
            init.clone(),
            Some(&l),
            SamplerKind::Ddim,
            20,
            &mut rng,
            &sched,
        )
        .map_err(|e| e.to_string())?;
        for (a, b) in full.data().iter().zip(tiled.data()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    let mut max_norm_err = 0.0f64;
    let layouts = 8;
    for _ in 0..layouts {
        let h = rng.random_range(8..48);
        let w = rng.random_range(8..48);
        let tile = rng.random_range(2..=h.min(w).min(16));
        let stride = rng.random_range(1..=tile);
        let sigma = rng.random_range(0.5..5.0);
        let l = make_layout(h, w, tile, stride, sigma).unwrap();
        let mut total = vec![0.0; h * w];
        for n in 0..l.len() {
            let nw = l.normalized_weights(n);
            let (y0, x0) = l.regions[n];
            for i in 0..tile * tile {
                total[(y0 + i / tile) * w + x0 + i % tile] += nw[i];
            }
        }
        for v in total {
            max_norm_err = max_norm_err.max((v - 1.0).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        max_diff < 1e-4 && max_norm_err < 1e-6 && secs < 60.0,
        format!("tiled vs full max |diff| {max_diff:.2e}, weight sum error {max_norm_err:.2e} over {layouts} layouts, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// 3. color correction

fn channel_stats(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    (
        m,
        (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

fn color_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut idempotent = true;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(4..40), rng.random_range(4..40));
        let scale: f32 = rng.random_range(0.1..3.0);
        let shift: f32 = rng.random_range(-1.0..1.0);
        let enh = Image::new(
            w,
            h,
            (0..3 * w * h)
                .map(|_| rng.random::<f32>() * scale + shift)
                .collect(),
        )
        .unwrap();
        let lq = Image::new(w, h, (0..3 * w * h).map(|_| rng.random::<f32>()).collect()).unwrap();
        let once = color_correct_unclamped(&enh, &lq).unwrap();
        for c in 0..3 {
            let (mo, so) = channel_stats(once.plane(c));
            let (ml, sl) = channel_stats(lq.plane(c));
            worst = worst.max((mo - ml).abs()).max((so - sl).abs());
        }
        idempotent &= color_correct_unclamped(&once, &lq).unwrap() == once;
    }
    ensure(
        worst < 1e-6 && idempotent,
        format!("100 pairs, worst mean/std deviation {worst:.2e}, idempotent {idempotent}"),
    )
}

// ---------------------------------------------------------------------------
// 4. identity contracts

fn identity_contracts() -> Outcome {
    let cfg = RunConfig::default();
    let model = Model::new(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = gaussian(&[2, 4, 16, 16], &mut rng);
    let c = gaussian(&[2, 4, 16, 16], &mut rng);
    let with = FrozenDenoiser {
        model: &model.denoiser,
        store: &model.store,
        conditioned: true,
    };
    let without = FrozenDenoiser {
        model: &model.denoiser,
        store: &model.store,
        conditioned: false,
    };
    let mut sft_identical = true;
    for t in [1, 250, 999] {
        sft_identical &= with.predict(&z, t, &c).unwrap() == without.predict(&z, t, &c).unwrap();
    }

    // w = 0 must bypass fusion even with a trained-looking (nonzero) CFW.
    let mut store = model.store.clone();
    for (id, name) in store
        .iter()
        .map(|(id, n, _)| (id, n.to_string()))
        .collect::<Vec<_>>()
    {
        if name.starts_with(CFW_PREFIX) {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let x = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let (zl, taps) = model.codec.encode(&p, &g.constant(&x)).unwrap();
    let plain = model.codec.decode(&p, &zl, None).unwrap().value();
    let fused0 = decode_fused(&model.codec, &model.cfw, &p, &zl, &taps, 0.0)
        .unwrap()
        .value();
    let fused1 = decode_fused(&model.codec, &model.cfw, &p, &zl, &taps, 1.0)
        .unwrap()
        .value();
    let cfw_identical = fused0 == plain;
    let cfw_live = fused1 != plain;
    ensure(
        sft_identical && cfw_identical && cfw_live,
        format!("zero-init SFT bit-identical {sft_identical}; w=0 decode bit-identical {cfw_identical} (w=1 differs {cfw_live})"),
    )
}

// ---------------------------------------------------------------------------
// 5. DDIM inversion

fn ddim_oracle() -> Outcome {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f32;
    let mut ts = Vec::new();
    for _ in 0..10 {
        let t = rng.random_range(1..=sched.steps);
        ts.push(t);
        let z0 = gaussian(&[1, 4, 8, 8], &mut rng);
        let eps = gaussian(z0.shape(), &mut rng);
        let zt = q_sample(&z0, &[t], &eps, &sched).unwrap();
        let back = ddim_step(&zt, &eps, t, 0, &sched).unwrap();
        for (a, b) in z0.data().iter().zip(back.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(
        worst < 1e-5,
        format!("10 pairs at t = {ts:?}, max |z0 - z0_hat| {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 6 and 7. scaled experiment on the default configuration

fn default_run() -> &'static Result<(MetricsReport, PathBuf, f64), String> {
    static CELL: std::sync::OnceLock<Result<(MetricsReport, PathBuf, f64), String>> =
        std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-default");
        let _ = std::fs::remove_dir_all(&dir);
        let t0 = Instant::now();
        let mut p = Pipeline::new(RunConfig::default(), &dir, true).map_err(|e| e.to_string())?;
        let report = p.run_all().map_err(|e| e.to_string())?;
        Ok((report, dir, t0.elapsed().as_secs_f64()))
    })
}

fn scaled_experiment() -> Outcome {
    let (report, dir, secs) = default_run().as_ref().map_err(|e| e.clone())?;
    let gain = report.psnr_gain();
    let reduction = report.proxy_reduction();
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let recorded = MetricsReport::rows_from_csv(&csv)
        .map_err(|e| e.to_string())?
        .len()
        == report.rows.len() + 1;
    ensure(
        gain >= 0.5 && reduction >= 0.10 && recorded,
        format!(
            "PSNR {:.3} -> {:.3} dB (gain {gain:+.3}), proxy {:.5} -> {:.5} (reduction {:.1}%), {} views, {:.0} min",
            report.mean.psnr_raw,
            report.mean.psnr_restored,
            report.mean.proxy_raw,
            report.mean.proxy_restored,
            100.0 * reduction,
            report.rows.len(),
            secs / 60.0
        ),
    )
}

fn fidelity_ordering() -> Outcome {
    let (report, _, _) = default_run().as_ref().map_err(|e| e.clone())?;
    let (w1, w05) = (report.mean.psnr_restored, report.mean.psnr_half);
    ensure(
        w1 >= w05,
        format!("PSNR(w=1) {w1:.3} dB vs PSNR(w=0.5) {w05:.3} dB"),
    )
}

// ---------------------------------------------------------------------------
// 8. trainability audit

fn changed_components(before: &ParamStore, after: &ParamStore) -> BTreeSet<String> {
    before
        .iter()
        .zip(after.iter())
        .filter(|((_, _, a), (_, _, b))| a.data() != b.data())
        .map(|((_, n, _), _)| component_of(n).to_string())
        .collect()
}

fn trainability_audit() -> Outcome {
    let cfg = common::tiny_config();
    let views = generate_viewset(&cfg.scene(), &cfg.viewset_config(), cfg.seed)
        .map_err(|e| e.to_string())?;
    let mut model = Model::new(&cfg).map_err(|e| e.to_string())?;
    let mut log = RunLog::silent();
    train_codec_and_prior(&mut model, &views, &cfg, &mut log).map_err(|e| e.to_string())?;

    let snap = model.store.clone();
    train_stage1(
        &mut model,
        &views,
        &cfg,
        &mut log,
        &mut TrainHooks::default(),
    )
    .map_err(|e| e.to_string())?;
    let moved1 = changed_components(&snap, &model.store);
    let probe1 = audit_stage1(&model, &views, &cfg).map_err(|e| e.to_string())?;

    let snap = model.store.clone();
    train_stage2(
        &mut model,
        &views,
        &cfg,
        &mut log,
        &mut TrainHooks::default(),
    )
    .map_err(|e| e.to_string())?;
    let moved2 = changed_components(&snap, &model.store);
    let probe2 = audit_stage2(&model, &views, &cfg).map_err(|e| e.to_string())?;

    let want1: BTreeSet<String> = STAGE1_COMPONENTS.iter().map(|s| s.to_string()).collect();
    let want2: BTreeSet<String> = STAGE2_COMPONENTS.iter().map(|s| s.to_string()).collect();
    ensure(
        probe1 == want1 && moved1 == want1 && probe2 == want2 && moved2 == want2,
        format!("stage1 probe {probe1:?} updated {moved1:?}; stage2 probe {probe2:?} updated {moved2:?}"),
    )
}

// ---------------------------------------------------------------------------
// 9. determinism and persistence

fn run_cli(dir: &Path, config: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nerfrestore"))
        .args([
            "--config",
            config.to_str().unwrap(),
            "--out-dir",
            dir.to_str().unwrap(),
            "-q",
            "run-all",
        ])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = root.path().join("tiny.cfg");
    std::fs::write(&config, common::TINY).map_err(|e| e.to_string())?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let out_a = run_cli(&a, &config)?;
    let out_b = run_cli(&b, &config)?;
    let csv_a = std::fs::read(a.join("metrics.csv")).map_err(|e| e.to_string())?;
    let csv_b = std::fs::read(b.join("metrics.csv")).map_err(|e| e.to_string())?;
    let same_csv = csv_a == csv_b && out_a == out_b && !out_a.is_empty();

    let mut same_ckpt = true;
    let mut checked = 0;
    for stage in [STAGE_CODEC, STAGE1, STAGE2] {
        let path = a.join(format!("{stage}.drnt"));
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        same_ckpt &= ck.to_bytes() == bytes;
        let (cfg, model) = Model::from_checkpoint(&ck).map_err(|e| e.to_string())?;
        same_ckpt &= model.to_checkpoint(&cfg, stage).to_bytes() == bytes;
        same_ckpt &=
            std::fs::read(b.join(format!("{stage}.drnt"))).map_err(|e| e.to_string())? == bytes;
        checked += 1;
    }
    ensure(
        same_csv && same_ckpt,
        format!("two CLI run-all executions: identical CSV {same_csv}; {checked} checkpoints round-trip bit-exactly {same_ckpt}"),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient suite", gradient_suite),
        ("2 tiling oracle", tiling_oracle),
        ("3 color correction", color_oracle),
        ("4 identity contracts", identity_contracts),
        ("5 ddim inversion", ddim_oracle),
        ("6 scaled restoration", scaled_experiment),
        ("7 fidelity ordering", fidelity_ordering),
        ("8 trainability audit", trainability_audit),
        ("9 determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = fmt_duration(t0.elapsed());
        match outcome {
            Ok(msg) => println!("PASS  criterion {name}: {msg} [{took}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name}: {msg} [{took}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    let s = d.as_secs_f64();
    if s < 60.0 {
        format!("{s:.1}s")
    } else {
        format!("{:.1} min", s / 60.0)
    }
}
