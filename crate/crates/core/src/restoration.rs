//! Stage-two components and inference: controllable feature wrapping (CFW),
//! patch discriminator, perceptual proxy, adversarial losses, color
//! correction, and the end-to-end `restore` path.

use autodiff::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Codec, DecoderFusion, Taps};
use crate::diffusion::{
    gaussian, Denoiser, FrozenDenoiser, NoiseSchedule, SamplerKind, LATENT_MULTIPLE,
};
use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::nn::{l1, seeded_rng, Conv2d, Init};
use crate::tiling::{make_layout, tiled_reverse_sample, TileLayout};

const LEAK: f64 = 0.2;
const RESIDUAL_SCALE: f64 = 0.2;

struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(init: &mut Init, name: &str, nf: usize, gc: usize) -> Result<Self> {
        let mut i = init.sub(name);
        let convs = (0..5)
            .map(|k| {
                let cout = if k == 4 { nf } else { gc };
                Conv2d::new(&mut i, &format!("conv{k}"), nf + k * gc, cout, 3, 1)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, x: &Var<'g, S>) -> Result<Var<'g, S>> {
        let mut feats = vec![*x];
        for (k, conv) in self.convs.iter().enumerate() {
            let inp = if feats.len() == 1 {
                *x
            } else {
                Var::concat(&feats, 1)?
            };
            let y = conv.forward(p, &inp)?;
            if k == 4 {
                return Ok(y.mul_scalar(S::from_f64(RESIDUAL_SCALE)).add(x)?);
            }
            feats.push(y.leaky_relu(LEAK));
        }
        unreachable!("five convolutions")
    }
}

struct Rrdb {
    blocks: [DenseBlock; 3],
}

impl Rrdb {
    fn new(init: &mut Init, name: &str, nf: usize, gc: usize) -> Result<Self> {
        let mut i = init.sub(name);
        Ok(Self {
            blocks: [
                DenseBlock::new(&mut i, "rdb0", nf, gc)?,
                DenseBlock::new(&mut i, "rdb1", nf, gc)?,
                DenseBlock::new(&mut i, "rdb2", nf, gc)?,
            ],
        })
    }

    fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, x: &Var<'g, S>) -> Result<Var<'g, S>> {
        let mut h = *x;
        for b in &self.blocks {
            h = b.forward(p, &h)?;
        }
        Ok(h.mul_scalar(S::from_f64(RESIDUAL_SCALE)).add(x)?)
    }
}

/// `C(F_e, F_d)`: conv, two RRDBs, zero-initialized output conv.
struct FusionNet {
    level: usize,
    channels: usize,
    conv_in: Conv2d,
    rrdbs: [Rrdb; 2],
    conv_out: Conv2d,
}

impl FusionNet {
    fn forward<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        f_e: &Var<'g, S>,
        f_d: &Var<'g, S>,
    ) -> Result<Var<'g, S>> {
        let mut h = self.conv_in.forward(p, &Var::concat(&[*f_e, *f_d], 1)?)?;
        for r in &self.rrdbs {
            h = r.forward(p, &h)?;
        }
        self.conv_out.forward(p, &h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfwConfig {
    pub features: usize,
    pub growth: usize,
}

impl Default for CfwConfig {
    fn default() -> Self {
        Self {
            features: 16,
            growth: 8,
        }
    }
}

pub const CFW_PREFIX: &str = "cfw.";

/// One fusion network per codec tap level.
pub struct CfwModule {
    nets: Vec<FusionNet>,
}

impl CfwModule {
    pub fn new(codec: &Codec, cfg: &CfwConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, "cfw-init");
        let mut root = Init::new(store, &mut rng, "cfw");
        let mut nets = Vec::new();
        for &level in &codec.config.tap_levels {
            let c = codec.config.width(level);
            let mut i = root.sub(&format!("level{level}"));
            nets.push(FusionNet {
                level,
                channels: c,
                conv_in: Conv2d::new(&mut i, "conv_in", 2 * c, cfg.features, 3, 1)?,
                rrdbs: [
                    Rrdb::new(&mut i, "rrdb0", cfg.features, cfg.growth)?,
                    Rrdb::new(&mut i, "rrdb1", cfg.features, cfg.growth)?,
                ],
                conv_out: Conv2d::zeroed(&mut i, "conv_out", cfg.features, c, 3)?,
            });
        }
        Ok(Self { nets })
    }

    /// Binds the module to a graph with fidelity coefficient `w` (clamped
    /// to `[0, 1]`).
    pub fn bind<'a, 'g, S: Scalar>(&'a self, p: &'a Bound<'g, S>, w: f64) -> BoundCfw<'a, 'g, S> {
        BoundCfw {
            cfw: self,
            p,
            w: w.clamp(0.0, 1.0),
        }
    }
}

pub struct BoundCfw<'a, 'g, S: Scalar> {
    cfw: &'a CfwModule,
    p: &'a Bound<'g, S>,
    w: f64,
}

impl<'g, S: Scalar> DecoderFusion<'g, S> for BoundCfw<'_, 'g, S> {
    fn fuse(&self, level: usize, f_e: &Var<'g, S>, f_d: &Var<'g, S>) -> Result<Var<'g, S>> {
        let net = self
            .cfw
            .nets
            .iter()
            .find(|n| n.level == level)
            .ok_or_else(|| shape_err!("no CFW network for tap level {level}"))?;
        if f_d.shape().get(1) != Some(&net.channels) {
            return Err(shape_err!(
                "CFW level {level} expects {} channels, got {:?}",
                net.channels,
                f_d.shape()
            ));
        }
        cfw_fuse(f_e, f_d, self.w, |a, b| net.forward(self.p, a, b))
    }
}

/// `F_d + C(F_e, F_d) * w`; with `w == 0` the fusion net is not evaluated
/// and `F_d` is returned untouched.
pub fn cfw_fuse<'g, S: Scalar>(
    f_e: &Var<'g, S>,
    f_d: &Var<'g, S>,
    w: f64,
    net: impl FnOnce(&Var<'g, S>, &Var<'g, S>) -> Result<Var<'g, S>>,
) -> Result<Var<'g, S>> {
    if f_e.shape() != f_d.shape() {
        return Err(shape_err!(
            "cfw_fuse: F_e {:?} vs F_d {:?}",
            f_e.shape(),
            f_d.shape()
        ));
    }
    let w = w.clamp(0.0, 1.0);
    if w == 0.0 {
        return Ok(*f_d);
    }
    let c = net(f_e, f_d)?;
    Ok(f_d.add(&c.mul_scalar(S::from_f64(w)))?)
}

pub const DISC_PREFIX: &str = "disc.";

/// Three strided convolutions producing a map of real/fake logits.
pub struct PatchDiscriminator {
    convs: [Conv2d; 3],
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, "disc-init");
        let mut i = Init::new(store, &mut rng, "disc");
        Ok(Self {
            convs: [
                Conv2d::new(&mut i, "conv0", 3, 32, 3, 2)?,
                Conv2d::new(&mut i, "conv1", 32, 64, 3, 2)?,
                Conv2d::new(&mut i, "conv2", 64, 1, 3, 1)?,
            ],
        })
    }

    pub fn forward<'g, S: Scalar>(&self, p: &Bound<'g, S>, x: &Var<'g, S>) -> Result<Var<'g, S>> {
        let h = self.convs[0].forward(p, x)?.leaky_relu(LEAK);
        let h = self.convs[1].forward(p, &h)?.leaky_relu(LEAK);
        self.convs[2].forward(p, &h)
    }

    /// Input pixels seen by one output logit along each axis.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for c in &self.convs {
            rf += 2 * jump;
            jump *= c.stride;
        }
        rf
    }
}

/// Mean squared distance between frozen encoder taps of `x` and `y`,
/// averaged over tap levels.
pub fn perceptual_proxy<'g, S: Scalar>(
    codec: &Codec,
    p: &Bound<'g, S>,
    x: &Var<'g, S>,
    y: &Var<'g, S>,
) -> Result<Var<'g, S>> {
    if x.shape() != y.shape() {
        return Err(shape_err!(
            "perceptual proxy: {:?} vs {:?}",
            x.shape(),
            y.shape()
        ));
    }
    let (_, tx) = codec.encode(p, x)?;
    let (_, ty) = codec.encode(p, y)?;
    let mut total: Option<Var<'g, S>> = None;
    let mut levels = 0;
    for ((_, a), (_, b)) in tx.iter().zip(ty.iter()) {
        let d = a.sub(b)?.square().mean();
        total = Some(match total {
            Some(t) => t.add(&d)?,
            None => d,
        });
        levels += 1;
    }
    let total = total
        .ok_or_else(|| Error::Config("perceptual proxy needs at least one codec tap".into()))?;
    Ok(total.mul_scalar(S::from_f64(1.0 / levels as f64)))
}

/// Frozen perceptual proxy between two images.
pub fn perceptual_distance(codec: &Codec, store: &ParamStore, x: &Image, y: &Image) -> Result<f64> {
    let f = codec.factor();
    let (xp, yp) = (x.pad_to_multiple(f), y.pad_to_multiple(f));
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let d = perceptual_proxy(
        codec,
        &p,
        &g.constant(&xp.to_tensor()),
        &g.constant(&yp.to_tensor()),
    )?;
    Ok(d.item() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Weights {
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            perceptual: 1.0,
            adversarial: 0.05,
        }
    }
}

/// `L1 + lambda_p * proxy + lambda_g * mean(-log D(x_hat))`, from the
/// discriminator logits on `x_hat`.
pub fn generator_loss<'g, S: Scalar>(
    x: &Var<'g, S>,
    x_hat: &Var<'g, S>,
    proxy: &Var<'g, S>,
    fake_logits: &Var<'g, S>,
    w: Stage2Weights,
) -> Result<Var<'g, S>> {
    let adv = fake_logits.log_sigmoid().mean().neg();
    Ok(l1(x, x_hat)?
        .add(&proxy.mul_scalar(S::from_f64(w.perceptual)))?
        .add(&adv.mul_scalar(S::from_f64(w.adversarial)))?)
}

/// `-[log D(x) + log(1 - D(x_hat))]` averaged over the logit maps.
pub fn discriminator_loss<'g, S: Scalar>(
    real_logits: &Var<'g, S>,
    fake_logits: &Var<'g, S>,
) -> Result<Var<'g, S>> {
    let real = real_logits.log_sigmoid().mean();
    let fake = fake_logits.neg().log_sigmoid().mean();
    Ok(real.add(&fake)?.neg())
}

pub const COLOR_EPS: f64 = 1e-6;
/// Channel statistics closer than this to the reference count as matched.
const STATS_TOL: f64 = 1e-7;

fn channel_stats(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-channel mean/std alignment of `x_enh` to `x_lq`, without clamping.
/// Channels whose statistics already match are passed through unchanged,
/// so the correction is an exact fixpoint.
pub fn color_correct_unclamped(x_enh: &Image, x_lq: &Image) -> Result<Image> {
    if !x_enh.same_size(x_lq) {
        return Err(shape_err!("color correction needs equal image sizes"));
    }
    let mut out = x_enh.clone();
    let n = x_enh.width() * x_enh.height();
    for c in 0..3 {
        let (mu_e, sd_e) = channel_stats(x_enh.plane(c));
        let (mu_l, sd_l) = channel_stats(x_lq.plane(c));
        if (mu_e - mu_l).abs() <= STATS_TOL && (sd_e - sd_l).abs() <= STATS_TOL {
            continue;
        }
        let gain = sd_l / sd_e.max(COLOR_EPS);
        let dst = &mut out.data_mut()[c * n..(c + 1) * n];
        for v in dst.iter_mut() {
            *v = ((*v as f64 - mu_e) * gain + mu_l) as f32;
        }
    }
    Ok(out)
}

/// [`color_correct_unclamped`] followed by clamping to `[0, 1]`.
pub fn color_correct(x_enh: &Image, x_lq: &Image) -> Result<Image> {
    let mut out = color_correct_unclamped(x_enh, x_lq)?;
    out.clamp01();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub tile: usize,
    pub stride: usize,
    pub tile_sigma: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 20,
            tile: 8,
            stride: 4,
            tile_sigma: 2.0,
        }
    }
}

impl SamplerConfig {
    /// Tile layout for a latent, or `None` when it fits in a single tile.
    pub fn layout(&self, h: usize, w: usize) -> Result<Option<TileLayout>> {
        if h < self.tile || w < self.tile || (h == self.tile && w == self.tile) {
            return Ok(None);
        }
        make_layout(h, w, self.tile, self.stride, self.tile_sigma).map(Some)
    }
}

/// All trained components needed at inference.
pub struct Restorer<'a> {
    pub store: &'a ParamStore,
    pub codec: &'a Codec,
    pub denoiser: &'a Denoiser,
    pub cfw: &'a CfwModule,
    pub schedule: &'a NoiseSchedule,
}

impl Restorer<'_> {
    /// Image sides are padded to this so the latent suits the U-Net.
    pub fn pad_multiple(&self) -> usize {
        self.codec.factor() * LATENT_MULTIPLE
    }

    /// Latent sample conditioned on `z_lq` (`[1, C, h, w]`).
    pub fn sample_latent(
        &self,
        z_lq: &Tensor<f32>,
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = gaussian(z_lq.shape(), &mut rng);
        let s = z_lq.shape();
        let layout = sampler.layout(s[2], s[3])?;
        let model = FrozenDenoiser {
            model: self.denoiser,
            store: self.store,
            conditioned: true,
        };
        tiled_reverse_sample(
            &model,
            z_lq,
            init,
            layout.as_ref(),
            sampler.kind,
            sampler.steps,
            &mut rng,
            self.schedule,
        )
    }

    /// Pad, encode, sample, decode with CFW at fidelity `w`, crop, and
    /// color-correct against the input.
    pub fn restore(
        &self,
        image_lq: &Image,
        w: f64,
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<Image> {
        let raw = self.restore_uncorrected(image_lq, w, sampler, seed)?;
        color_correct(&raw, image_lq)
    }

    pub fn restore_uncorrected(
        &self,
        image_lq: &Image,
        w: f64,
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<Image> {
        let padded = image_lq.pad_to_multiple(self.pad_multiple());
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let (z_lq, taps) = self.codec.encode(&p, &g.constant(&padded.to_tensor()))?;
        let z0 = self.sample_latent(&z_lq.value(), sampler, seed)?;
        let out = decode_fused(self.codec, self.cfw, &p, &g.constant(&z0), &taps, w)?;
        Image::from_tensor(&out.value())?.crop(0, 0, image_lq.width(), image_lq.height())
    }
}

/// Decoder with CFW fusion at fidelity `w`.
pub fn decode_fused<'g, S: Scalar>(
    codec: &Codec,
    cfw: &CfwModule,
    p: &Bound<'g, S>,
    z: &Var<'g, S>,
    taps: &Taps<'g, S>,
    w: f64,
) -> Result<Var<'g, S>> {
    let fusion = cfw.bind(p, w);
    codec.decode(p, z, Some((taps, &fusion)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discriminator_is_patch_based() {
        let mut store = ParamStore::new();
        let d = PatchDiscriminator::new(&mut store, 0).unwrap();
        assert!(d.receptive_field() < 32);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let y = d
            .forward(&p, &g.constant(&Tensor::zeros(&[2, 3, 32, 32])))
            .unwrap();
        assert_eq!(y.shape(), vec![2, 1, 8, 8]);
    }

    #[test]
    fn half_probability_losses() {
        let g = Graph::<f64>::new();
        let zero = g.constant(&Tensor::zeros(&[1, 1, 2, 2]));
        let d = discriminator_loss(&zero, &zero).unwrap().item();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let x = g.constant(&Tensor::full(&[1, 3, 2, 2], 0.4));
        let proxy = g.scalar(0.0);
        let gl = generator_loss(
            &x,
            &x,
            &proxy,
            &zero,
            Stage2Weights {
                perceptual: 1.0,
                adversarial: 1.0,
            },
        )
        .unwrap()
        .item();
        assert!((gl - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_image_color_correction_is_guarded() {
        let a = Image::filled(4, 4, [0.5, 0.5, 0.5]);
        let b = Image::filled(4, 4, [0.2, 0.3, 0.4]);
        let c = color_correct(&a, &b).unwrap();
        assert!(c.data().iter().all(|v| v.is_finite()));
        assert!((c.get(2, 1, 1) - 0.4).abs() < 1e-6);
    }
}
