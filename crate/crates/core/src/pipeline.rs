//! Training drivers, evaluation, gradient audits and on-disk artifacts.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use autodiff::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{stack, train_codec, Codec, DECODER_PREFIX, ENCODER_PREFIX};
use crate::config::RunConfig;
use crate::diffusion::{
    diffusion_loss, gaussian, reverse_sample, stage1_loss, Denoiser, FrozenDenoiser, NoiseSchedule,
    SamplerKind, SFT_PREFIX, TIME_ENCODER_PREFIX, UNET_PREFIX,
};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::metrics::{psnr, ssim};
use crate::nn::seeded_rng;
use crate::radiance_field::{
    nerf_loss, sample_rays_patch, sample_rays_pixel, stratified_samples, PatchSampler,
    SubPatchBuffer, VoxelGrid,
};
use crate::restoration::{
    color_correct, decode_fused, discriminator_loss, generator_loss, perceptual_distance,
    perceptual_proxy, CfwModule, PatchDiscriminator, Restorer, SamplerConfig, CFW_PREFIX,
    DISC_PREFIX,
};
use crate::scene::{Camera, Split, ViewSet};

pub const STAGE_CODEC: &str = "codec";
pub const STAGE1: &str = "stage1";
pub const STAGE2: &str = "stage2";

/// Component a parameter belongs to, by name prefix.
pub fn component_of(name: &str) -> &'static str {
    if name.starts_with("grid.") {
        "grid"
    } else if name.starts_with(TIME_ENCODER_PREFIX) {
        "time_encoder"
    } else if name.starts_with(SFT_PREFIX) {
        "sft"
    } else if name.starts_with(UNET_PREFIX) {
        "unet"
    } else if name.starts_with(ENCODER_PREFIX) {
        "encoder"
    } else if name.starts_with(DECODER_PREFIX) {
        "decoder"
    } else if name.starts_with(CFW_PREFIX) {
        "cfw"
    } else if name.starts_with(DISC_PREFIX) {
        "discriminator"
    } else {
        "other"
    }
}

pub const STAGE1_COMPONENTS: [&str; 3] = ["grid", "sft", "time_encoder"];
pub const STAGE2_COMPONENTS: [&str; 3] = ["cfw", "decoder", "discriminator"];

pub fn stage1_trainable(name: &str) -> bool {
    STAGE1_COMPONENTS.contains(&component_of(name))
}

pub fn stage2_generator_trainable(name: &str) -> bool {
    matches!(component_of(name), "cfw" | "decoder")
}

pub fn stage2_disc_trainable(name: &str) -> bool {
    component_of(name) == "discriminator"
}

fn diffusion_branch(name: &str) -> bool {
    matches!(component_of(name), "sft" | "time_encoder")
}

/// Every learned component in one parameter store.
pub struct Model {
    pub store: ParamStore,
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub grid: VoxelGrid,
    pub cfw: CfwModule,
    pub disc: PatchDiscriminator,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let codec = Codec::new(cfg.codec_config(), &mut store, cfg.seed)?;
        let denoiser = Denoiser::new(cfg.unet_config(), &mut store, cfg.seed)?;
        let grid = VoxelGrid::new(&mut store, cfg.grid_resolution)?;
        let cfw = CfwModule::new(&codec, &cfg.cfw_config(), &mut store, cfg.seed)?;
        let disc = PatchDiscriminator::new(&mut store, cfg.seed)?;
        Ok(Self {
            store,
            codec,
            denoiser,
            grid,
            cfw,
            disc,
            schedule: cfg.schedule()?,
        })
    }

    pub fn restorer(&self) -> Restorer<'_> {
        Restorer {
            store: &self.store,
            codec: &self.codec,
            denoiser: &self.denoiser,
            cfw: &self.cfw,
            schedule: &self.schedule,
        }
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig, stage: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("stage", stage);
        ck.set_meta("config_hash", cfg.hash());
        ck.set_meta("config", cfg.to_text());
        ck.set_meta("latent_scale", format!("{:e}", self.codec.latent_scale));
        ck.insert_params(&self.store, |_| true);
        ck
    }

    /// Rebuilds the model described by a checkpoint's embedded config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Self)> {
        let cfg = RunConfig::parse_str(ck.meta("config")?)?;
        let mut model = Self::new(&cfg)?;
        model.load(ck)?;
        Ok((cfg, model))
    }

    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_params(&mut self.store, |_| true)?;
        let scale = ck.meta("latent_scale")?;
        self.codec.latent_scale = scale.parse().map_err(|_| Error::Checkpoint {
            path: PathBuf::from("<memory>"),
            msg: format!("bad latent_scale {scale:?}"),
        })?;
        Ok(())
    }

    /// Restores at several fidelity weights from one latent sample.
    pub fn restore_weights(
        &self,
        lq: &Image,
        ws: &[f64],
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<Vec<Image>> {
        let padded = lq.pad_to_multiple(self.restorer().pad_multiple());
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let (z_lq, taps) = self.codec.encode(&p, &g.constant(&padded.to_tensor()))?;
        let z0 = g.constant(
            &self
                .restorer()
                .sample_latent(&z_lq.value(), sampler, seed)?,
        );
        ws.iter()
            .map(|&w| {
                let out = decode_fused(&self.codec, &self.cfw, &p, &z0, &taps, w)?;
                let img = Image::from_tensor(&out.value())?.crop(0, 0, lq.width(), lq.height())?;
                color_correct(&img, lq)
            })
            .collect()
    }
}

/// Progress log mirrored to stderr and an optional file.
pub struct RunLog {
    file: Option<File>,
    pub quiet: bool,
    lines: Vec<String>,
}

impl RunLog {
    pub fn new(path: Option<&Path>, quiet: bool) -> Result<Self> {
        let file = match path {
            Some(p) => Some(
                File::options()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            ),
            None => None,
        };
        Ok(Self {
            file,
            quiet,
            lines: Vec::new(),
        })
    }

    pub fn silent() -> Self {
        Self {
            file: None,
            quiet: true,
            lines: Vec::new(),
        }
    }

    pub fn line(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        if !self.quiet {
            eprintln!("{msg}");
        }
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{msg}");
        }
        self.lines.push(msg);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

/// Callbacks around the stage loops.
pub struct TrainHooks<'a> {
    /// Called every `eval.interval` steps and at the end with a finite model.
    pub checkpoint: Box<dyn FnMut(&Model, usize) -> Result<()> + 'a>,
    /// Called before each step; tests use it to inject faults.
    pub before_step: Box<dyn FnMut(&mut ParamStore, usize) + 'a>,
}

impl Default for TrainHooks<'_> {
    fn default() -> Self {
        Self {
            checkpoint: Box::new(|_, _| Ok(())),
            before_step: Box::new(|_, _| {}),
        }
    }
}

fn finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            step,
            what: what.into(),
        })
    }
}

fn derive_seed(seed: u64, stream: &str) -> u64 {
    seeded_rng(seed, stream).random()
}

// ----------------------------------------------------------------------------
// Dataset

fn camera_tensor(c: &Camera) -> Result<Tensor<f64>> {
    let mut v = Vec::with_capacity(12);
    v.extend_from_slice(&c.position);
    v.extend_from_slice(&c.target);
    v.extend_from_slice(&c.up);
    v.extend_from_slice(&[c.fov_y, c.width as f64, c.height as f64]);
    Ok(Tensor::new(&[12], v)?)
}

fn camera_from(t: &Tensor<f64>) -> Result<Camera> {
    let d = t.data();
    if d.len() != 12 {
        return Err(Error::InvalidArgument(format!(
            "camera record has {} values",
            d.len()
        )));
    }
    let cam = Camera {
        position: [d[0], d[1], d[2]],
        target: [d[3], d[4], d[5]],
        up: [d[6], d[7], d[8]],
        fov_y: d[9],
        width: d[10] as usize,
        height: d[11] as usize,
    };
    cam.validate()?;
    Ok(cam)
}

pub fn viewset_checkpoint(views: &ViewSet, cfg: &RunConfig) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.set_meta("stage", "dataset");
    ck.set_meta("config_hash", cfg.hash());
    ck.set_meta("views", views.cameras.len());
    let splits: Vec<&str> = views
        .splits
        .iter()
        .map(|s| match s {
            Split::Train => "train",
            Split::Test => "test",
        })
        .collect();
    ck.set_meta("splits", splits.join(","));
    for (i, (cam, img)) in views.cameras.iter().zip(&views.images).enumerate() {
        ck.insert_f64(format!("view{i:03}.camera"), camera_tensor(cam)?);
        ck.insert_f32(format!("view{i:03}.image"), img.to_tensor());
    }
    Ok(ck)
}

pub fn viewset_from_checkpoint(ck: &Checkpoint) -> Result<ViewSet> {
    let splits = ck
        .meta("splits")?
        .split(',')
        .map(|s| match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut views = ViewSet {
        cameras: Vec::new(),
        images: Vec::new(),
        splits,
    };
    for i in 0..views.splits.len() {
        views
            .cameras
            .push(camera_from(ck.f64(&format!("view{i:03}.camera"))?)?);
        views
            .images
            .push(Image::from_tensor(ck.f32(&format!("view{i:03}.image"))?)?);
    }
    views.validate()?;
    Ok(views)
}

/// Random `size x size` crops of the training references, `[3, size, size]`.
pub fn reference_crops(
    views: &ViewSet,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    let ids = views.indices(Split::Train);
    let mut rng = seeded_rng(seed, "codec-patches");
    (0..n)
        .map(|_| {
            let v = ids[rng.random_range(0..ids.len())];
            let img = &views.images[v];
            let x = rng.random_range(0..=img.width() - size);
            let y = rng.random_range(0..=img.height() - size);
            let t = img.crop(x, y, size, size)?.to_tensor();
            Ok(t.reshape(&[3, size, size])?)
        })
        .collect()
}

// ----------------------------------------------------------------------------
// Codec and diffusion prior

/// Trains the codec, then the unconditional U-Net prior on its latents.
pub fn train_codec_and_prior(
    model: &mut Model,
    views: &ViewSet,
    cfg: &RunConfig,
    log: &mut RunLog,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let crops = reference_crops(views, cfg.codec_patches, cfg.patch_size, cfg.seed)?;
    let interval = cfg.eval_interval;
    let codec_curve = train_codec(
        &mut model.codec,
        &mut model.store,
        &crops,
        &cfg.codec_train_config(),
        |s, l| {
            if (s + 1) % interval == 0 {
                log.line(format!("codec step {}: L1 {l:.5}", s + 1));
            }
        },
    )?;
    log.line(format!(
        "codec latent scale {:.4}",
        model.codec.latent_scale
    ));
    let mut latents = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(64) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let z = model.codec.encode_tensor(&model.store, &stack(&refs)?)?;
        let n = z.shape()[0];
        for i in 0..n {
            latents.push(z.narrow(0, i, 1)?);
        }
    }
    let prior_curve = pretrain_prior(model, &latents, cfg, log)?;
    model.denoiser.init_encoder_from_unet(&mut model.store)?;
    Ok((codec_curve, prior_curve))
}

/// Unconditional epsilon-prediction training of the U-Net on `[1, C, h, w]` latents.
pub fn pretrain_prior(
    model: &mut Model,
    latents: &[Tensor<f32>],
    cfg: &RunConfig,
    log: &mut RunLog,
) -> Result<Vec<f64>> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument(
            "prior training needs latents".into(),
        ));
    }
    let trainable = |n: &str| component_of(n) == "unet";
    let mut adam = Adam::for_store(AdamConfig::with_lr(cfg.prior_lr), &model.store, trainable);
    let mut rng = seeded_rng(cfg.seed, "prior");
    let mut curve = Vec::with_capacity(cfg.prior_steps);
    let mut window = 0.0;
    for step in 0..cfg.prior_steps {
        let picks: Vec<&Tensor<f32>> = (0..cfg.prior_batch)
            .map(|_| &latents[rng.random_range(0..latents.len())])
            .collect();
        let z = Tensor::cat(&picks, 0)?;
        let g = Graph::new();
        let p = model.store.bind(&g, trainable);
        let loss = diffusion_loss(&model.denoiser, &p, &z, None, &mut rng, &model.schedule)?;
        let lv = finite(step, "prior diffusion loss", loss.item() as f64)?;
        g.backward(loss)?;
        let mut grads = p.grads();
        drop(p);
        adam.step(&mut model.store, &mut grads)?;
        curve.push(lv);
        window += lv;
        if (step + 1) % cfg.eval_interval == 0 {
            log.line(format!(
                "prior step {}: eps-MSE {:.5}",
                step + 1,
                window / cfg.eval_interval as f64
            ));
            window = 0.0;
        }
    }
    Ok(curve)
}

// ----------------------------------------------------------------------------
// Stage one

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Stage1Report {
    pub nerf_curve: Vec<f64>,
    pub diffusion_curve: Vec<f64>,
    pub pairs: usize,
    pub switch_step: usize,
    pub separate: bool,
}

/// Latent pairs `(z_lq, z_hq)`, each `[1, C, h, w]`.
struct Replay {
    pairs: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Replay {
    /// The newest pair plus uniformly drawn earlier ones.
    fn batch(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let last = self.pairs.len() - 1;
        let idx: Vec<usize> = std::iter::once(last)
            .chain((1..n).map(|_| rng.random_range(0..self.pairs.len())))
            .collect();
        let lq: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.pairs[i].0).collect();
        let hq: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.pairs[i].1).collect();
        Ok((Tensor::cat(&lq, 0)?, Tensor::cat(&hq, 0)?))
    }
}

fn encode_pair(model: &Model, lq: &Image, hq: &Image) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let z = model
        .codec
        .encode_tensor(&model.store, &batch_tensor(&[lq, hq])?)?;
    Ok((z.narrow(0, 0, 1)?, z.narrow(0, 1, 1)?))
}

/// One update of the time-aware encoder and SFT layers on a replay batch.
fn diffusion_only_step(
    model: &mut Model,
    adam: &mut Adam<f32>,
    replay: &Replay,
    cfg: &RunConfig,
    rng: &mut impl Rng,
    step: usize,
) -> Result<f64> {
    let (zl, zh) = replay.batch(cfg.diffusion_batch, rng)?;
    let g = Graph::new();
    let p = model.store.bind(&g, diffusion_branch);
    let loss = diffusion_loss(&model.denoiser, &p, &zh, Some(&zl), rng, &model.schedule)?;
    let lv = finite(step, "diffusion loss", loss.item() as f64)?;
    g.backward(loss.mul_scalar(cfg.lambda.max(f64::MIN_POSITIVE) as f32))?;
    let mut grads = p.grads();
    drop(p);
    adam.step(&mut model.store, &mut grads)?;
    Ok(lv)
}

/// Joint (or, with `stage1.separate`, sequential) training of the voxel
/// grid and the diffusion conditioning branch.
pub fn train_stage1(
    model: &mut Model,
    views: &ViewSet,
    cfg: &RunConfig,
    log: &mut RunLog,
    hooks: &mut TrainHooks,
) -> Result<Stage1Report> {
    let train_ids = views.indices(Split::Train);
    let bg = cfg.scene().background;
    let reg = cfg.reg_weights();
    let mut adam_grid = Adam::for_store(AdamConfig::with_lr(cfg.grid_lr), &model.store, |n| {
        component_of(n) == "grid"
    });
    let mut adam_diff = Adam::for_store(
        AdamConfig::with_lr(cfg.diffusion_lr),
        &model.store,
        diffusion_branch,
    );
    let mut rng = seeded_rng(cfg.seed, "stage1");
    let switch_step = (cfg.stage1_steps as f64 * cfg.pixel_fraction).round() as usize;
    let mut sampler = PatchSampler::new(
        (cfg.patch_size, cfg.patch_size),
        (cfg.subpatch_width, cfg.subpatch_height),
    )?;
    let mut buffer = SubPatchBuffer::new(cfg.patch_size, cfg.patch_size);
    let mut replay = Replay { pairs: Vec::new() };
    let joint = !cfg.separate_stage1 && cfg.lambda > 0.0;
    let mut report = Stage1Report {
        switch_step,
        separate: cfg.separate_stage1,
        ..Default::default()
    };
    let trainable = |n: &str| stage1_trainable(n);
    let mut window = (0.0, 0.0, 0usize);

    for step in 0..cfg.stage1_steps {
        (hooks.before_step)(&mut model.store, step);
        if step == switch_step {
            log.line(format!(
                "stage1 step {step}: switching from pixel to patch ray sampling"
            ));
        }
        let (batch, sub) = if step < switch_step {
            (
                sample_rays_pixel(views, &train_ids, cfg.rays_per_step, &mut rng)?,
                None,
            )
        } else {
            let sub = sampler.next(views, &train_ids, &mut rng)?;
            (sample_rays_patch(views, &sub)?, Some(sub))
        };
        let samples = stratified_samples(&batch.rays, cfg.train_samples, Some(&mut rng));
        let g = Graph::new();
        let p = model.store.bind(&g, trainable);
        let rendered = model.grid.render(&p, &samples, bg)?;
        let grid_var = p.var(model.grid.param);
        let nerf = nerf_loss(&rendered, &g.constant(&batch.targets), &grid_var, reg)?;
        let nerf_v = finite(step, "nerf loss", nerf.item() as f64)?;

        let mut diff = None;
        if let Some(sub) = sub {
            buffer.insert(&sub, rendered.value().data())?;
            if let Some(pair) = buffer.take(views)? {
                report.pairs += 1;
                if joint {
                    replay.pairs.push(encode_pair(model, &pair.lq, &pair.hq)?);
                    let (zl, zh) = replay.batch(cfg.diffusion_batch, &mut rng)?;
                    diff = Some(diffusion_loss(
                        &model.denoiser,
                        &p,
                        &zh,
                        Some(&zl),
                        &mut rng,
                        &model.schedule,
                    )?);
                }
            }
        }
        let diff_v = match &diff {
            Some(d) => Some(finite(step, "diffusion loss", d.item() as f64)?),
            None => None,
        };
        let total = stage1_loss(&nerf, diff.as_ref(), cfg.lambda)?;
        g.backward(total)?;
        let mut grads = p.grads();
        drop(p);
        let mut diff_grads = diff_v.map(|_| grads.clone());
        adam_grid.step(&mut model.store, &mut grads)?;
        if let (Some(d), Some(dg)) = (diff_v, diff_grads.as_mut()) {
            adam_diff.step(&mut model.store, dg)?;
            report.diffusion_curve.push(d);
            window.1 += d;
            window.2 += 1;
        }
        report.nerf_curve.push(nerf_v);
        window.0 += nerf_v;
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.stage1_steps {
            let n = (step % cfg.eval_interval + 1) as f64;
            let diff_msg = if window.2 > 0 {
                format!(
                    ", diffusion {:.5} over {} pairs",
                    window.1 / window.2 as f64,
                    window.2
                )
            } else {
                String::new()
            };
            log.line(format!(
                "stage1 step {}: nerf {:.6}{diff_msg}",
                step + 1,
                window.0 / n
            ));
            window = (0.0, 0.0, 0);
            (hooks.checkpoint)(model, step + 1)?;
        }
    }

    if cfg.separate_stage1 && cfg.lambda > 0.0 && report.pairs > 0 {
        log.line(format!(
            "stage1: training the diffusion branch on {} pairs from the final field",
            report.pairs
        ));
        let mut window = 0.0;
        for k in 0..report.pairs {
            let step = cfg.stage1_steps + k;
            (hooks.before_step)(&mut model.store, step);
            let (lq, hq) = render_patch_pair(model, views, &train_ids, cfg, &mut rng)?;
            replay.pairs.push(encode_pair(model, &lq, &hq)?);
            let lv = diffusion_only_step(model, &mut adam_diff, &replay, cfg, &mut rng, step)?;
            report.diffusion_curve.push(lv);
            window += lv;
            if (k + 1) % cfg.eval_interval == 0 || k + 1 == report.pairs {
                log.line(format!(
                    "stage1 diffusion step {}: {:.5}",
                    k + 1,
                    window / ((k % cfg.eval_interval) + 1) as f64
                ));
                window = 0.0;
                (hooks.checkpoint)(model, step + 1)?;
            }
        }
    }
    Ok(report)
}

/// A full training-sampled patch rendering and its reference crop.
fn render_patch_pair(
    model: &Model,
    views: &ViewSet,
    ids: &[usize],
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Result<(Image, Image)> {
    let mut sampler = PatchSampler::new(
        (cfg.patch_size, cfg.patch_size),
        (cfg.patch_size, cfg.patch_size),
    )?;
    let sub = sampler.next(views, ids, rng)?;
    let batch = sample_rays_patch(views, &sub)?;
    let samples = stratified_samples(&batch.rays, cfg.train_samples, Some(rng));
    let g = Graph::new();
    let p = model.store.bind_frozen(&g);
    let rgb = model
        .grid
        .render(&p, &samples, cfg.scene().background)?
        .value();
    let mut buffer = SubPatchBuffer::new(cfg.patch_size, cfg.patch_size);
    buffer.insert(&sub, rgb.data())?;
    let pair = buffer
        .take(views)?
        .expect("a single full sub-patch completes the buffer");
    Ok((pair.lq, pair.hq))
}

/// Components with a nonzero gradient after one joint stage-one probe step.
pub fn audit_stage1(model: &Model, views: &ViewSet, cfg: &RunConfig) -> Result<BTreeSet<String>> {
    let ids = views.indices(Split::Train);
    let mut rng = seeded_rng(cfg.seed, "audit1");
    let (lq, hq) = render_patch_pair(model, views, &ids, cfg, &mut rng)?;
    let (zl, zh) = encode_pair(model, &lq, &hq)?;
    let batch = sample_rays_pixel(views, &ids, cfg.rays_per_step, &mut rng)?;
    let samples = stratified_samples(&batch.rays, cfg.train_samples, Some(&mut rng));
    let g = Graph::new();
    let p = model.store.bind(&g, stage1_trainable);
    let rendered = model.grid.render(&p, &samples, cfg.scene().background)?;
    let nerf = nerf_loss(
        &rendered,
        &g.constant(&batch.targets),
        &p.var(model.grid.param),
        cfg.reg_weights(),
    )?;
    let diff = diffusion_loss(
        &model.denoiser,
        &p,
        &zh,
        Some(&zl),
        &mut rng,
        &model.schedule,
    )?;
    g.backward(stage1_loss(&nerf, Some(&diff), cfg.lambda.max(1.0))?)?;
    Ok(nonzero_components(&model.store, &p.grads()))
}

fn nonzero_components(store: &ParamStore, grads: &autodiff::Gradients<f32>) -> BTreeSet<String> {
    grads
        .nonzero_ids()
        .into_iter()
        .map(|id| component_of(store.name(id)).to_string())
        .collect()
}

// ----------------------------------------------------------------------------
// Stage two

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Stage2Report {
    pub generator_curve: Vec<f64>,
    pub discriminator_curve: Vec<f64>,
    pub heldout_l1_before: f64,
    pub heldout_l1_after: f64,
}

/// Low-quality crop, reference crop and the sampled latent for it.
pub struct Stage2Sample {
    pub lq: Tensor<f32>,
    pub hq: Tensor<f32>,
    pub z0: Tensor<f32>,
}

/// Crops of the field's renderings of `split` views with diffusion samples
/// drawn once from the frozen conditioned denoiser.
pub fn stage2_pool(
    model: &Model,
    views: &ViewSet,
    cfg: &RunConfig,
    split: Split,
    n: usize,
    stream: &str,
) -> Result<Vec<Stage2Sample>> {
    let ids = views.indices(split);
    let bg = cfg.scene().background;
    let renders = ids
        .iter()
        .map(|&v| {
            model
                .grid
                .render_image(&model.store, &views.cameras[v], cfg.eval_samples, bg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seeded_rng(cfg.seed, stream);
    let size = cfg.patch_size;
    let mut crops = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..ids.len());
        let img = &views.images[ids[k]];
        let x = rng.random_range(0..=img.width() - size);
        let y = rng.random_range(0..=img.height() - size);
        crops.push((
            renders[k].crop(x, y, size, size)?,
            img.crop(x, y, size, size)?,
        ));
    }
    let model_fn = FrozenDenoiser {
        model: &model.denoiser,
        store: &model.store,
        conditioned: true,
    };
    let mut out = Vec::with_capacity(n);
    for chunk in crops.chunks(32) {
        let lq_imgs: Vec<&Image> = chunk.iter().map(|c| &c.0).collect();
        let lq = batch_tensor(&lq_imgs)?;
        let z_lq = model.codec.encode_tensor(&model.store, &lq)?;
        let init = gaussian(z_lq.shape(), &mut rng);
        let z0 = reverse_sample(
            &model_fn,
            &z_lq,
            init,
            SamplerKind::Ddim,
            cfg.stage2_sample_steps,
            &mut rng,
            &model.schedule,
        )?;
        for (i, (l, h)) in chunk.iter().enumerate() {
            out.push(Stage2Sample {
                lq: l.to_tensor(),
                hq: h.to_tensor(),
                z0: z0.narrow(0, i, 1)?,
            });
        }
    }
    Ok(out)
}

fn gather(pool: &[Stage2Sample], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let pick = |f: fn(&Stage2Sample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let v: Vec<&Tensor<f32>> = idx.iter().map(|&i| f(&pool[i])).collect();
        Ok(Tensor::cat(&v, 0)?)
    };
    Ok((pick(|s| &s.lq)?, pick(|s| &s.hq)?, pick(|s| &s.z0)?))
}

/// Mean L1 between the CFW decode (w = 1) and the references.
pub fn pool_l1(model: &Model, pool: &[Stage2Sample]) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..pool.len()).step_by(16) {
        let idx: Vec<usize> = (start..(start + 16).min(pool.len())).collect();
        let (lq, hq, z0) = gather(pool, &idx)?;
        let g = Graph::new();
        let p = model.store.bind_frozen(&g);
        let (_, taps) = model.codec.encode(&p, &g.constant(&lq))?;
        let x_hat = decode_fused(&model.codec, &model.cfw, &p, &g.constant(&z0), &taps, 1.0)?;
        total += crate::nn::l1(&x_hat, &g.constant(&hq))?.item() as f64 * idx.len() as f64;
    }
    Ok(total / pool.len() as f64)
}

/// Alternating generator / discriminator training of CFW and the decoder.
pub fn train_stage2(
    model: &mut Model,
    views: &ViewSet,
    cfg: &RunConfig,
    log: &mut RunLog,
    hooks: &mut TrainHooks,
) -> Result<Stage2Report> {
    let t0 = Instant::now();
    let pool = stage2_pool(
        model,
        views,
        cfg,
        Split::Train,
        cfg.stage2_pool,
        "stage2-pool",
    )?;
    let val = stage2_pool(model, views, cfg, Split::Test, cfg.stage2_val, "stage2-val")?;
    log.line(format!(
        "stage2: sampled {} training and {} held-out latents in {:.1}s",
        pool.len(),
        val.len(),
        t0.elapsed().as_secs_f64()
    ));
    let mut report = Stage2Report {
        heldout_l1_before: pool_l1(model, &val)?,
        ..Default::default()
    };
    log.line(format!(
        "stage2: held-out L1 before {:.5}",
        report.heldout_l1_before
    ));
    let mut adam_g = Adam::for_store(
        AdamConfig::with_lr(cfg.stage2_lr),
        &model.store,
        stage2_generator_trainable,
    );
    let mut adam_d = Adam::for_store(
        AdamConfig::with_lr(cfg.disc_lr),
        &model.store,
        stage2_disc_trainable,
    );
    let mut rng = seeded_rng(cfg.seed, "stage2");
    let weights = cfg.stage2_weights();
    let mut window = (0.0, 0.0);
    for step in 0..cfg.stage2_steps {
        (hooks.before_step)(&mut model.store, step);
        let idx: Vec<usize> = (0..cfg.stage2_batch)
            .map(|_| rng.random_range(0..pool.len()))
            .collect();
        let (lq, hq, z0) = gather(&pool, &idx)?;

        let (g_loss, x_hat) = {
            let g = Graph::new();
            let p = model.store.bind(&g, stage2_generator_trainable);
            let (_, taps) = model.codec.encode(&p, &g.constant(&lq))?;
            let x_hat = decode_fused(&model.codec, &model.cfw, &p, &g.constant(&z0), &taps, 1.0)?;
            let x = g.constant(&hq);
            let proxy = perceptual_proxy(&model.codec, &p, &x, &x_hat)?;
            let fake = model.disc.forward(&p, &x_hat)?;
            let loss = generator_loss(&x, &x_hat, &proxy, &fake, weights)?;
            let lv = finite(step, "generator loss", loss.item() as f64)?;
            let xv = x_hat.value();
            g.backward(loss)?;
            let mut grads = p.grads();
            drop(p);
            adam_g.step(&mut model.store, &mut grads)?;
            (lv, xv)
        };
        let d_loss = {
            let g = Graph::new();
            let p = model.store.bind(&g, stage2_disc_trainable);
            let real = model.disc.forward(&p, &g.constant(&hq))?;
            let fake = model.disc.forward(&p, &g.constant(&x_hat))?;
            let loss = discriminator_loss(&real, &fake)?;
            let lv = finite(step, "discriminator loss", loss.item() as f64)?;
            g.backward(loss)?;
            let mut grads = p.grads();
            drop(p);
            adam_d.step(&mut model.store, &mut grads)?;
            lv
        };
        report.generator_curve.push(g_loss);
        report.discriminator_curve.push(d_loss);
        window.0 += g_loss;
        window.1 += d_loss;
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.stage2_steps {
            let n = (step % cfg.eval_interval + 1) as f64;
            log.line(format!(
                "stage2 step {}: generator {:.5}, discriminator {:.5}",
                step + 1,
                window.0 / n,
                window.1 / n
            ));
            window = (0.0, 0.0);
            (hooks.checkpoint)(model, step + 1)?;
        }
    }
    report.heldout_l1_after = pool_l1(model, &val)?;
    log.line(format!(
        "stage2: held-out L1 after {:.5}",
        report.heldout_l1_after
    ));
    Ok(report)
}

/// Components with nonzero gradients over one generator and one
/// discriminator probe step.
pub fn audit_stage2(model: &Model, views: &ViewSet, cfg: &RunConfig) -> Result<BTreeSet<String>> {
    let mut probe = cfg.clone();
    probe.stage2_sample_steps = probe.stage2_sample_steps.min(4);
    let pool = stage2_pool(model, views, &probe, Split::Train, 2, "audit2")?;
    let (lq, hq, z0) = gather(&pool, &[0, 1])?;
    let mut seen = BTreeSet::new();
    let x_hat = {
        let g = Graph::new();
        let p = model.store.bind(&g, stage2_generator_trainable);
        let (_, taps) = model.codec.encode(&p, &g.constant(&lq))?;
        let x_hat = decode_fused(&model.codec, &model.cfw, &p, &g.constant(&z0), &taps, 1.0)?;
        let x = g.constant(&hq);
        let proxy = perceptual_proxy(&model.codec, &p, &x, &x_hat)?;
        let fake = model.disc.forward(&p, &x_hat)?;
        let xv = x_hat.value();
        g.backward(generator_loss(
            &x,
            &x_hat,
            &proxy,
            &fake,
            cfg.stage2_weights(),
        )?)?;
        seen.extend(nonzero_components(&model.store, &p.grads()));
        xv
    };
    let g = Graph::new();
    let p = model.store.bind(&g, stage2_disc_trainable);
    let real = model.disc.forward(&p, &g.constant(&hq))?;
    let fake = model.disc.forward(&p, &g.constant(&x_hat))?;
    g.backward(discriminator_loss(&real, &fake)?)?;
    seen.extend(nonzero_components(&model.store, &p.grads()));
    Ok(seen)
}

// ----------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    pub psnr_raw: f64,
    pub psnr_restored: f64,
    pub psnr_half: f64,
    pub ssim_raw: f64,
    pub ssim_restored: f64,
    pub proxy_raw: f64,
    pub proxy_restored: f64,
}

/// Per-test-view metrics plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub w: f64,
    pub rows: Vec<ViewMetrics>,
    pub mean: ViewMetrics,
}

impl MetricsReport {
    pub fn psnr_gain(&self) -> f64 {
        self.mean.psnr_restored - self.mean.psnr_raw
    }

    /// Relative reduction of the perceptual proxy.
    pub fn proxy_reduction(&self) -> f64 {
        1.0 - self.mean.proxy_restored / self.mean.proxy_raw
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            w.serialize(r)
                .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<ViewMetrics>> {
        csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<ViewMetrics>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
    }
}

fn mean_row(rows: &[ViewMetrics]) -> ViewMetrics {
    let n = rows.len() as f64;
    let avg = |f: fn(&ViewMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    ViewMetrics {
        view: "mean".into(),
        psnr_raw: avg(|r| r.psnr_raw),
        psnr_restored: avg(|r| r.psnr_restored),
        psnr_half: avg(|r| r.psnr_half),
        ssim_raw: avg(|r| r.ssim_raw),
        ssim_restored: avg(|r| r.ssim_restored),
        proxy_raw: avg(|r| r.proxy_raw),
        proxy_restored: avg(|r| r.proxy_restored),
    }
}

/// Renders each test view, restores it at `restore.w` and at 0.5, and
/// scores both against the reference. Optionally writes comparison strips
/// (reference | raw | restored | w=0.5).
pub fn evaluate(
    model: &Model,
    views: &ViewSet,
    cfg: &RunConfig,
    image_dir: Option<&Path>,
    log: &mut RunLog,
) -> Result<MetricsReport> {
    let sampler = cfg.sampler_config();
    let bg = cfg.scene().background;
    let mut rows = Vec::new();
    if let Some(dir) = image_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for v in views.indices(Split::Test) {
        let gt = &views.images[v];
        let raw = model
            .grid
            .render_image(&model.store, &views.cameras[v], cfg.eval_samples, bg)?;
        let seed = derive_seed(cfg.seed, &format!("restore-view{v}"));
        let out = model.restore_weights(&raw, &[cfg.w, 0.5], &sampler, seed)?;
        let (restored, half) = (&out[0], &out[1]);
        let row = ViewMetrics {
            view: v.to_string(),
            psnr_raw: psnr(&raw, gt)?,
            psnr_restored: psnr(restored, gt)?,
            psnr_half: psnr(half, gt)?,
            ssim_raw: ssim(&raw, gt)?,
            ssim_restored: ssim(restored, gt)?,
            proxy_raw: perceptual_distance(&model.codec, &model.store, &raw, gt)?,
            proxy_restored: perceptual_distance(&model.codec, &model.store, restored, gt)?,
        };
        log.line(format!(
            "eval view {v}: PSNR {:.3} -> {:.3} (w=0.5: {:.3}), SSIM {:.4} -> {:.4}, proxy {:.5} -> {:.5}",
            row.psnr_raw, row.psnr_restored, row.psnr_half, row.ssim_raw, row.ssim_restored, row.proxy_raw, row.proxy_restored
        ));
        if let Some(dir) = image_dir {
            Image::hstack(&[gt, &raw, restored, half])?
                .save_png(&dir.join(format!("view{v:03}.png")))?;
        }
        rows.push(row);
    }
    let mean = mean_row(&rows);
    Ok(MetricsReport {
        w: cfg.w,
        rows,
        mean,
    })
}

// ----------------------------------------------------------------------------
// On-disk pipeline

/// Artifact layout inside the output directory.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub log: RunLog,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out_dir: impl Into<PathBuf>, quiet: bool) -> Result<Self> {
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let log = RunLog::new(Some(&out_dir.join("log.txt")), quiet)?;
        Ok(Self { cfg, out_dir, log })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path("dataset.drnt")
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.path(&format!("{stage}.drnt"))
    }

    fn load_views(&self) -> Result<ViewSet> {
        viewset_from_checkpoint(&Checkpoint::load(&self.dataset_path())?)
    }

    /// Model with weights from `stage`, built from this run's config.
    pub fn load_model(&mut self, stage: &str) -> Result<Model> {
        let ck = Checkpoint::load(&self.checkpoint_path(stage))?;
        if ck.meta("config_hash")? != self.cfg.hash() {
            self.log.line(format!(
                "note: {stage} checkpoint was written under a different config"
            ));
        }
        let mut model = Model::new(&self.cfg)?;
        model.load(&ck)?;
        Ok(model)
    }

    /// Merges `value` under `key` into `manifest.json`.
    fn record(&self, key: &str, value: serde_json::Value) -> Result<()> {
        let path = self.path("manifest.json");
        let mut root = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| serde_json::json!({})),
            Err(_) => serde_json::json!({}),
        };
        root["config_hash"] = self.cfg.hash().into();
        root["seed"] = self.cfg.seed.into();
        root["config"] = serde_json::to_value(self.cfg.to_map()).expect("string map serializes");
        root[key] = value;
        let text = serde_json::to_string_pretty(&root).expect("json value serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn make_dataset(&mut self) -> Result<ViewSet> {
        let t0 = Instant::now();
        let views = crate::scene::generate_viewset(
            &self.cfg.scene(),
            &self.cfg.viewset_config(),
            self.cfg.seed,
        )?;
        viewset_checkpoint(&views, &self.cfg)?.save(&self.dataset_path())?;
        let dir = self.path("dataset");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, img) in views.images.iter().enumerate() {
            let tag = match views.splits[i] {
                Split::Train => "train",
                Split::Test => "test",
            };
            img.save_png(&dir.join(format!("{tag}_{i:03}.png")))?;
        }
        let secs = t0.elapsed().as_secs_f64();
        self.log.line(format!(
            "dataset: {} views in {secs:.1}s",
            views.images.len()
        ));
        self.record(
            "dataset",
            serde_json::json!({ "views": views.images.len(), "seconds": secs }),
        )?;
        Ok(views)
    }

    pub fn train_codec(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let views = self.load_views()?;
        let mut model = Model::new(&self.cfg)?;
        let (codec_curve, prior_curve) =
            train_codec_and_prior(&mut model, &views, &self.cfg, &mut self.log)?;
        model
            .to_checkpoint(&self.cfg, STAGE_CODEC)
            .save(&self.checkpoint_path(STAGE_CODEC))?;
        let secs = t0.elapsed().as_secs_f64();
        self.log
            .line(format!("codec + prior trained in {secs:.1}s"));
        self.record(
            "codec",
            serde_json::json!({
                "final_l1": codec_curve.last(),
                "final_prior_loss": prior_curve.last(),
                "latent_scale": model.codec.latent_scale,
                "seconds": secs,
            }),
        )
    }

    pub fn train_stage1(&mut self) -> Result<Stage1Report> {
        let t0 = Instant::now();
        let views = self.load_views()?;
        let mut model = self.load_model(STAGE_CODEC)?;
        let path = self.checkpoint_path(STAGE1);
        let cfg = self.cfg.clone();
        let mut hooks = TrainHooks {
            checkpoint: Box::new(|m: &Model, _| m.to_checkpoint(&cfg, STAGE1).save(&path)),
            ..Default::default()
        };
        let report = train_stage1(&mut model, &views, &self.cfg, &mut self.log, &mut hooks);
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                self.log.line(format!(
                    "stage1 aborted: {e}; last good checkpoint kept at {}",
                    path.display()
                ));
                return Err(e);
            }
        };
        let audit = audit_stage1(&model, &views, &self.cfg)?;
        self.log.line(format!("stage1 gradient audit: {audit:?}"));
        let secs = t0.elapsed().as_secs_f64();
        self.record(
            "stage1",
            serde_json::json!({
                "pairs": report.pairs,
                "switch_step": report.switch_step,
                "separate": report.separate,
                "final_nerf_loss": report.nerf_curve.last(),
                "final_diffusion_loss": report.diffusion_curve.last(),
                "audit": audit,
                "seconds": secs,
            }),
        )?;
        Ok(report)
    }

    pub fn train_stage2(&mut self) -> Result<Stage2Report> {
        let t0 = Instant::now();
        let views = self.load_views()?;
        let mut model = self.load_model(STAGE1)?;
        let path = self.checkpoint_path(STAGE2);
        let cfg = self.cfg.clone();
        let mut hooks = TrainHooks {
            checkpoint: Box::new(|m: &Model, _| m.to_checkpoint(&cfg, STAGE2).save(&path)),
            ..Default::default()
        };
        let report = train_stage2(&mut model, &views, &self.cfg, &mut self.log, &mut hooks)?;
        model.to_checkpoint(&self.cfg, STAGE2).save(&path)?;
        let audit = audit_stage2(&model, &views, &self.cfg)?;
        self.log.line(format!("stage2 gradient audit: {audit:?}"));
        let secs = t0.elapsed().as_secs_f64();
        self.record(
            "stage2",
            serde_json::json!({
                "heldout_l1_before": report.heldout_l1_before,
                "heldout_l1_after": report.heldout_l1_after,
                "final_generator_loss": report.generator_curve.last(),
                "final_discriminator_loss": report.discriminator_curve.last(),
                "audit": audit,
                "seconds": secs,
            }),
        )?;
        Ok(report)
    }

    pub fn evaluate(&mut self) -> Result<MetricsReport> {
        let t0 = Instant::now();
        let views = self.load_views()?;
        let model = self.load_model(STAGE2)?;
        let report = evaluate(
            &model,
            &views,
            &self.cfg,
            Some(&self.path("images")),
            &mut self.log,
        )?;
        let csv_path = self.path("metrics.csv");
        std::fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = self.path("metrics.json");
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| Error::io(&json_path, e))?;
        self.log.line(format!(
            "eval mean: PSNR {:.3} -> {:.3} ({:+.3} dB), proxy reduced {:.1}%",
            report.mean.psnr_raw,
            report.mean.psnr_restored,
            report.psnr_gain(),
            100.0 * report.proxy_reduction()
        ));
        self.record(
            "evaluate",
            serde_json::json!({
                "metrics": report,
                "psnr_gain_db": report.psnr_gain(),
                "proxy_reduction": report.proxy_reduction(),
                "seconds": t0.elapsed().as_secs_f64(),
            }),
        )?;
        Ok(report)
    }

    pub fn run_all(&mut self) -> Result<MetricsReport> {
        self.make_dataset()?;
        self.train_codec()?;
        self.train_stage1()?;
        self.train_stage2()?;
        self.evaluate()
    }
}

/// Restores one image from a stage-two checkpoint.
pub fn restore_file(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    w: f64,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Image> {
    let (_, model) = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let lq = Image::load_png(input)?;
    let out = model.restorer().restore(&lq, w, sampler, seed)?;
    out.save_png(output)?;
    Ok(out)
}
