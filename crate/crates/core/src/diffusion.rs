//! Latent diffusion: noise schedule, epsilon-prediction U-Net, time-aware
//! condition encoder with SFT modulation, losses, and DDIM/DDPM steps.

use autodiff::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::nn::{mse, seeded_rng, timestep_embedding, Conv2d, GroupNorm, Init, Linear};

/// Linear-beta schedule with tables indexed `0..=T`; index 0 is the clean
/// signal (`alpha_bar = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: T={steps}, beta {beta_start}..{beta_end}"
            )));
        }
        let mut betas = vec![0.0];
        let mut alphas = vec![1.0];
        let mut alpha_bars = vec![1.0];
        for i in 0..steps {
            let b = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            betas.push(b);
            alphas.push(1.0 - b);
            alpha_bars.push(alpha_bars[i] * (1.0 - b));
        }
        Ok(Self {
            steps,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Descending sampler timesteps `T, T - T/n, ..., T/n`.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps {
            return Err(Error::InvalidArgument(format!(
                "sampler steps must lie in 1..={}, got {n}",
                self.steps
            )));
        }
        let mut ts: Vec<usize> = (1..=n)
            .rev()
            .map(|k| ((k * self.steps) as f64 / n as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule")
    }
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`, with one timestep per batch
/// element (`ts.len() == N`) or a single shared one.
pub fn q_sample(
    z0: &Tensor<f32>,
    ts: &[usize],
    eps: &Tensor<f32>,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    if z0.shape() != eps.shape() {
        return Err(shape_err!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        ));
    }
    let n = z0.shape().first().copied().unwrap_or(1);
    if ts.len() != 1 && ts.len() != n {
        return Err(shape_err!(
            "q_sample: {} timesteps for batch of {n}",
            ts.len()
        ));
    }
    for &t in ts {
        sched.check_t(t)?;
    }
    let per = z0.numel() / n.max(1);
    let mut out = Vec::with_capacity(z0.numel());
    for (i, (a, e)) in z0.data().iter().zip(eps.data()).enumerate() {
        let t = if ts.len() == 1 { ts[0] } else { ts[i / per] };
        let ab = sched.alpha_bar(t);
        out.push((ab.sqrt() * *a as f64 + (1.0 - ab).sqrt() * *e as f64) as f32);
    }
    Ok(Tensor::new(z0.shape(), out)?)
}

fn predict_x0(z_t: f64, eps: f64, ab: f64) -> f64 {
    (z_t - (1.0 - ab).sqrt() * eps) / ab.sqrt()
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(
    z_t: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    check_step(z_t, eps_hat, t, t_prev, sched)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let x0 = predict_x0(z as f64, e as f64, ab);
            (ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e as f64) as f32
        })
        .collect();
    Ok(Tensor::new(z_t.shape(), data)?)
}

/// Ancestral DDPM update from `t` to `t_prev` using the posterior of the
/// (possibly strided) forward process. No noise is added when `t_prev == 0`.
pub fn ddpm_step(
    z_t: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    rng: &mut impl Rng,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    check_step(z_t, eps_hat, t, t_prev, sched)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let a_step = ab / ab_prev;
    let b_step = 1.0 - a_step;
    let c0 = ab_prev.sqrt() * b_step / (1.0 - ab);
    let ct = a_step.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let std = ((1.0 - ab_prev) / (1.0 - ab) * b_step).max(0.0).sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&z, &e)| {
            let x0 = predict_x0(z as f64, e as f64, ab);
            let mut v = c0 * x0 + ct * z as f64;
            if t_prev > 0 {
                let n: f64 = StandardNormal.sample(rng);
                v += std * n;
            }
            v as f32
        })
        .collect();
    Ok(Tensor::new(z_t.shape(), data)?)
}

fn check_step(
    z_t: &Tensor<f32>,
    eps: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<()> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "sampler step needs t_prev < t, got t={t}, t_prev={t_prev}"
        )));
    }
    if z_t.shape() != eps.shape() {
        return Err(shape_err!(
            "sampler step: z_t {:?} vs eps {:?}",
            z_t.shape(),
            eps.shape()
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "ddpm" => Ok(Self::Ddpm),
            _ => Err(Error::Config(format!(
                "unknown sampler {s:?} (expected ddim or ddpm)"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ddim => "ddim",
            Self::Ddpm => "ddpm",
        })
    }
}

/// Where SFT modulation is applied inside the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftSites {
    Decoder,
    EncoderAndDecoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub channels: [usize; 3],
    pub temb_dim: usize,
    pub sft_sites: SftSites,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channels: [32, 64, 128],
            temb_dim: 128,
            sft_sites: SftSites::Decoder,
        }
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, temb_dim: usize) -> Result<Self> {
        let mut i = init.sub(name);
        Ok(Self {
            norm1: GroupNorm::new(&mut i, "norm1", cin)?,
            conv1: Conv2d::new(&mut i, "conv1", cin, cout, 3, 1)?,
            temb: Linear::new(&mut i, "temb", temb_dim, cout)?,
            norm2: GroupNorm::new(&mut i, "norm2", cout)?,
            conv2: Conv2d::new(&mut i, "conv2", cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(&mut i, "skip", cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        x: &Var<'g, S>,
        temb: &Var<'g, S>,
    ) -> Result<Var<'g, S>> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x)?.silu())?;
        let h = h.add_channelwise(&self.temb.forward(p, temb)?)?;
        let h = self.conv2.forward(p, &self.norm2.forward(p, &h)?.silu())?;
        let skip = match &self.skip {
            Some(c) => c.forward(p, x)?,
            None => *x,
        };
        Ok(h.add(&skip)?)
    }
}

/// Sinusoidal features followed by a two-layer MLP, then SiLU.
struct TimeEmbed {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbed {
    fn new(init: &mut Init, dim: usize) -> Result<Self> {
        let mut i = init.sub("time");
        Ok(Self {
            dim,
            l1: Linear::new(&mut i, "l1", dim, dim)?,
            l2: Linear::new(&mut i, "l2", dim, dim)?,
        })
    }

    fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, ts: &[usize]) -> Result<Var<'g, S>> {
        let e = p.graph().constant(&timestep_embedding::<S>(ts, self.dim));
        let h = self.l1.forward(p, &e)?.silu();
        Ok(self.l2.forward(p, &h)?.silu())
    }
}

/// Contracting path shared in structure by the U-Net and the time-aware
/// condition encoder: one residual block per resolution with strided-conv
/// downsampling between them.
struct Contracting {
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
}

impl Contracting {
    fn new(init: &mut Init, cfg: &UNetConfig) -> Result<Self> {
        let ch = cfg.channels;
        let conv_in = Conv2d::new(init, "conv_in", cfg.latent_channels, ch[0], 3, 1)?;
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..3 {
            let cin = if l == 0 { ch[0] } else { ch[l - 1] };
            blocks.push(ResBlock::new(
                init,
                &format!("down{l}"),
                cin,
                ch[l],
                cfg.temb_dim,
            )?);
            if l < 2 {
                downs.push(Conv2d::new(
                    init,
                    &format!("downsample{l}"),
                    ch[l],
                    ch[l],
                    3,
                    2,
                )?);
            }
        }
        Ok(Self {
            conv_in,
            blocks,
            downs,
        })
    }

    /// Per-resolution features, finest first.
    fn forward<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        x: &Var<'g, S>,
        temb: &Var<'g, S>,
    ) -> Result<Vec<Var<'g, S>>> {
        let mut h = self.conv_in.forward(p, x)?;
        let mut feats = Vec::with_capacity(3);
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = self.downs[l - 1].forward(p, &h)?;
            }
            h = block.forward(p, &h, temb)?;
            feats.push(h);
        }
        Ok(feats)
    }
}

/// Maps a condition feature to `(alpha, beta)`; both output convs start at
/// zero so the modulation is initially the identity.
pub struct SftHead {
    shared: Conv2d,
    alpha: Conv2d,
    beta: Conv2d,
}

impl SftHead {
    fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mut i = init.sub(name);
        Ok(Self {
            shared: Conv2d::new(&mut i, "shared", channels, channels, 3, 1)?,
            alpha: Conv2d::zeroed(&mut i, "alpha", channels, channels, 3)?,
            beta: Conv2d::zeroed(&mut i, "beta", channels, channels, 3)?,
        })
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        cond: &Var<'g, S>,
    ) -> Result<(Var<'g, S>, Var<'g, S>)> {
        let h = self.shared.forward(p, cond)?.silu();
        Ok((self.alpha.forward(p, &h)?, self.beta.forward(p, &h)?))
    }
}

/// `(1 + alpha) * f + beta`.
pub fn sft_apply<'g, S: Scalar>(
    f: &Var<'g, S>,
    alpha: &Var<'g, S>,
    beta: &Var<'g, S>,
) -> Result<Var<'g, S>> {
    if alpha.shape() != f.shape() || beta.shape() != f.shape() {
        return Err(shape_err!(
            "sft scale mismatch: feature {:?}, alpha {:?}, beta {:?}",
            f.shape(),
            alpha.shape(),
            beta.shape()
        ));
    }
    Ok(f.mul(&alpha.add_scalar(S::one()))?.add(beta)?)
}

/// Parameter-name prefixes of the three diffusion components.
pub const UNET_PREFIX: &str = "unet.";
pub const TIME_ENCODER_PREFIX: &str = "tenc.";
pub const SFT_PREFIX: &str = "sft.";

/// Latent sides must be divisible by this (two 2x downsamplings).
pub const LATENT_MULTIPLE: usize = 4;

/// Frozen epsilon-prediction U-Net, trainable time-aware encoder, and SFT heads.
pub struct Denoiser {
    pub config: UNetConfig,
    u_time: TimeEmbed,
    u_down: Contracting,
    mid: ResBlock,
    ups: Vec<ResBlock>,
    up_convs: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    c_time: TimeEmbed,
    c_down: Contracting,
    sft_dec: Vec<SftHead>,
    sft_enc: Vec<SftHead>,
}

impl Denoiser {
    pub fn new(config: UNetConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        if config
            .channels
            .iter()
            .any(|c| c % crate::nn::NORM_GROUPS != 0)
            || config.temb_dim < 2
        {
            return Err(Error::Config(format!(
                "U-Net channels {:?} must be multiples of {}",
                config.channels,
                crate::nn::NORM_GROUPS
            )));
        }
        let ch = config.channels;
        let mut rng = seeded_rng(seed, "denoiser-init");
        let mut root = Init::new(store, &mut rng, "");

        let mut u = root.sub("unet");
        let u_time = TimeEmbed::new(&mut u, config.temb_dim)?;
        let u_down = Contracting::new(&mut u, &config)?;
        let mid = ResBlock::new(&mut u, "mid", ch[2], ch[2], config.temb_dim)?;
        let mut ups = Vec::new();
        let mut up_convs = Vec::new();
        for l in (0..3).rev() {
            let below = if l == 2 { ch[2] } else { ch[l] };
            ups.push(ResBlock::new(
                &mut u,
                &format!("up{l}"),
                below + ch[l],
                ch[l],
                config.temb_dim,
            )?);
            if l > 0 {
                up_convs.push(Conv2d::new(
                    &mut u,
                    &format!("upsample{l}"),
                    ch[l],
                    ch[l - 1],
                    3,
                    1,
                )?);
            }
        }
        let out_norm = GroupNorm::new(&mut u, "out_norm", ch[0])?;
        let out_conv = Conv2d::new(&mut u, "out", ch[0], config.latent_channels, 3, 1)?;

        let mut c = root.sub("tenc");
        let c_time = TimeEmbed::new(&mut c, config.temb_dim)?;
        let c_down = Contracting::new(&mut c, &config)?;

        let mut s = root.sub("sft");
        let sft_dec = (0..3)
            .map(|l| SftHead::new(&mut s, &format!("dec{l}"), ch[l]))
            .collect::<Result<Vec<_>>>()?;
        let sft_enc = if config.sft_sites == SftSites::EncoderAndDecoder {
            (0..3)
                .map(|l| SftHead::new(&mut s, &format!("enc{l}"), ch[l]))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            u_time,
            u_down,
            mid,
            ups,
            up_convs,
            out_norm,
            out_conv,
            c_time,
            c_down,
            sft_dec,
            sft_enc,
        })
    }

    /// Overwrites the time-aware encoder with the U-Net's current contracting path
    /// and time embedding, so conditioning starts from the trained prior.
    pub fn init_encoder_from_unet(&self, store: &mut ParamStore) -> Result<usize> {
        let targets: Vec<String> = store
            .iter()
            .filter(|(_, n, _)| n.starts_with(TIME_ENCODER_PREFIX))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for name in &targets {
            let src = format!("{UNET_PREFIX}{}", &name[TIME_ENCODER_PREFIX.len()..]);
            let id = store.find(&src).ok_or_else(|| {
                Error::Config(format!("encoder parameter {name} has no U-Net counterpart"))
            })?;
            let t = store.get(id).clone();
            store.set(name, t)?;
        }
        Ok(targets.len())
    }

    /// Multi-scale condition features `E_phi(z_lq, t)`, finest first.
    pub fn condition_features<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        z_lq: &Var<'g, S>,
        ts: &[usize],
    ) -> Result<Vec<Var<'g, S>>> {
        let temb = self.c_time.forward(p, ts)?;
        self.c_down.forward(p, z_lq, &temb)
    }

    /// Noise prediction. Without `z_lq` the SFT layers are skipped.
    pub fn predict<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        z_t: &Var<'g, S>,
        ts: &[usize],
        z_lq: Option<&Var<'g, S>>,
    ) -> Result<Var<'g, S>> {
        let s = z_t.shape();
        if s.len() != 4
            || s[1] != self.config.latent_channels
            || s[2] % LATENT_MULTIPLE != 0
            || s[3] % LATENT_MULTIPLE != 0
        {
            return Err(shape_err!(
                "denoiser input must be [N, {}, h, w] with h, w multiples of 4, got {s:?}",
                self.config.latent_channels
            ));
        }
        if ts.len() != s[0] {
            return Err(shape_err!(
                "denoiser got {} timesteps for batch {}",
                ts.len(),
                s[0]
            ));
        }
        let cond = match z_lq {
            Some(z) => {
                if z.shape() != s {
                    return Err(shape_err!("z_lq {:?} does not match z_t {s:?}", z.shape()));
                }
                Some(self.condition_features(p, z, ts)?)
            }
            None => None,
        };
        let modulate = |heads: &[SftHead], l: usize, f: Var<'g, S>| -> Result<Var<'g, S>> {
            match (&cond, heads.get(l)) {
                (Some(c), Some(head)) => {
                    let (a, b) = head.forward(p, &c[l])?;
                    sft_apply(&f, &a, &b)
                }
                _ => Ok(f),
            }
        };

        let temb = self.u_time.forward(p, ts)?;
        let mut skips = self.u_down.forward(p, z_t, &temb)?;
        for (l, f) in skips.iter_mut().enumerate() {
            *f = modulate(&self.sft_enc, l, *f)?;
        }
        let mut h = self.mid.forward(p, &skips[2], &temb)?;
        for (i, block) in self.ups.iter().enumerate() {
            let l = 2 - i;
            h = block.forward(p, &Var::concat(&[h, skips[l]], 1)?, &temb)?;
            h = modulate(&self.sft_dec, l, h)?;
            if l > 0 {
                h = self.up_convs[i].forward(p, &h.upsample2x()?)?;
            }
        }
        let h = self.out_norm.forward(p, &h)?.silu();
        self.out_conv.forward(p, &h)
    }
}

/// Frozen batch noise prediction, the interface samplers run against.
pub trait NoisePredictor {
    /// `z_t` and `cond` are `[N, C, h, w]`; every element shares timestep `t`.
    fn predict(&self, z_t: &Tensor<f32>, t: usize, cond: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A trained [`Denoiser`] evaluated without gradients.
pub struct FrozenDenoiser<'a> {
    pub model: &'a Denoiser,
    pub store: &'a ParamStore,
    pub conditioned: bool,
}

impl NoisePredictor for FrozenDenoiser<'_> {
    fn predict(&self, z_t: &Tensor<f32>, t: usize, cond: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let n = z_t.shape()[0];
        let c = g.constant(cond);
        let out = self.model.predict(
            &p,
            &g.constant(z_t),
            &vec![t; n],
            self.conditioned.then_some(&c),
        )?;
        Ok(out.value())
    }
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor<f32>, usize, &Tensor<f32>) -> Result<Tensor<f32>>,
{
    fn predict(&self, z_t: &Tensor<f32>, t: usize, cond: &Tensor<f32>) -> Result<Tensor<f32>> {
        self(z_t, t, cond)
    }
}

/// Standard normal tensor drawn from `rng`.
pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, rng)
}

/// One reverse update of either sampler.
pub fn sampler_step(
    kind: SamplerKind,
    z_t: &Tensor<f32>,
    eps: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    rng: &mut impl Rng,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    match kind {
        SamplerKind::Ddim => ddim_step(z_t, eps, t, t_prev, sched),
        SamplerKind::Ddpm => ddpm_step(z_t, eps, t, t_prev, rng, sched),
    }
}

/// Full reverse pass from `z_T = init` conditioned on `cond`.
pub fn reverse_sample(
    model: &dyn NoisePredictor,
    cond: &Tensor<f32>,
    init: Tensor<f32>,
    kind: SamplerKind,
    steps: usize,
    rng: &mut impl Rng,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let ts = sched.sampling_timesteps(steps)?;
    let mut z = init;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict(&z, t, cond)?;
        z = sampler_step(kind, &z, &eps, t, t_prev, rng, sched)?;
    }
    Ok(z)
}

/// Epsilon-prediction loss on a batch: random `t` per element, Gaussian
/// noise, mean squared error. Latents are treated as constants.
pub fn diffusion_loss<'g, S: Scalar>(
    model: &Denoiser,
    p: &Bound<'g, S>,
    z_hq: &Tensor<f32>,
    z_lq: Option<&Tensor<f32>>,
    rng: &mut impl Rng,
    sched: &NoiseSchedule,
) -> Result<Var<'g, S>> {
    let n = z_hq.shape()[0];
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps)).collect();
    let eps = gaussian(z_hq.shape(), rng);
    let z_t = q_sample(z_hq, &ts, &eps, sched)?;
    let g = p.graph();
    let cond = z_lq.map(|z| g.constant(&z.cast::<S>()));
    let pred = model.predict(p, &g.constant(&z_t.cast::<S>()), &ts, cond.as_ref())?;
    mse(&pred, &g.constant(&eps.cast::<S>()))
}

/// `L_nerf + lambda * L_diff`; with `lambda == 0` the diffusion term is
/// dropped entirely.
pub fn stage1_loss<'g, S: Scalar>(
    nerf: &Var<'g, S>,
    diff: Option<&Var<'g, S>>,
    lambda: f64,
) -> Result<Var<'g, S>> {
    match diff {
        Some(d) if lambda != 0.0 => Ok(nerf.add(&d.mul_scalar(S::from_f64(lambda)))?),
        _ => Ok(*nerf),
    }
}
