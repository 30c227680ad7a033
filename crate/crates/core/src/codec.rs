//! Small deterministic convolutional autoencoder mapping RGB images to a
//! standardized latent, with per-level encoder and decoder feature taps.

use autodiff::{Adam, AdamConfig, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{seeded_rng, Conv2d, Init};

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub downsample: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    /// Depths (0 = full resolution) whose features are exposed as taps.
    pub tap_levels: Vec<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            latent_channels: 4,
            base_width: 32,
            tap_levels: vec![0, 1],
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::Config(format!(
                "codec downsample must be a power of two >= 2, got {}",
                self.downsample
            )));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("codec widths must be positive".into()));
        }
        if let Some(&l) = self.tap_levels.iter().find(|&&l| l > self.levels()) {
            return Err(Error::Config(format!(
                "tap level {l} deeper than the {} codec levels",
                self.levels()
            )));
        }
        Ok(())
    }

    /// Number of 2x downsampling stages.
    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Channel width at depth `level`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width * if level == 0 { 1 } else { 2 }
    }
}

/// Feature maps indexed by level; `None` where no tap is configured.
#[derive(Clone)]
pub struct Taps<'g, S: Scalar> {
    pub levels: Vec<Option<Var<'g, S>>>,
}

impl<'g, S: Scalar> Taps<'g, S> {
    pub fn get(&self, level: usize) -> Option<&Var<'g, S>> {
        self.levels.get(level).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Var<'g, S>)> {
        self.levels
            .iter()
            .enumerate()
            .filter_map(|(l, v)| v.as_ref().map(|v| (l, v)))
    }
}

/// Hook applied to decoder features at each tap level.
pub trait DecoderFusion<'g, S: Scalar> {
    fn fuse(&self, level: usize, f_e: &Var<'g, S>, f_d: &Var<'g, S>) -> Result<Var<'g, S>>;
}

struct Stage {
    a: Conv2d,
    b: Conv2d,
}

/// Encoder and decoder layer definitions plus the latent scale constant.
/// Weights live in a [`ParamStore`] under the `codec.enc.` and
/// `codec.dec.` name prefixes.
pub struct Codec {
    pub config: CodecConfig,
    pub latent_scale: f32,
    enc_in: Stage,
    enc_down: Vec<Stage>,
    enc_out: Conv2d,
    dec_in: Stage,
    dec_up: Vec<Stage>,
    dec_out: Conv2d,
}

pub const ENCODER_PREFIX: &str = "codec.enc.";
pub const DECODER_PREFIX: &str = "codec.dec.";

impl Codec {
    pub fn new(config: CodecConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, "codec-init");
        let mut root = Init::new(store, &mut rng, "codec");
        let levels = config.levels();
        let w = |l| config.width(l);
        let stage = |i: &mut Init, name: &str, cin, cout, stride| -> Result<Stage> {
            let mut s = i.sub(name);
            Ok(Stage {
                a: Conv2d::new(&mut s, "a", cin, cout, 3, stride)?,
                b: Conv2d::new(&mut s, "b", cout, cout, 3, 1)?,
            })
        };

        let mut enc = root.sub("enc");
        let enc_in = stage(&mut enc, "in", 3, w(0), 1)?;
        let enc_down = (1..=levels)
            .map(|l| stage(&mut enc, &format!("down{l}"), w(l - 1), w(l), 2))
            .collect::<Result<Vec<_>>>()?;
        let enc_out = Conv2d::new(&mut enc, "out", w(levels), config.latent_channels, 3, 1)?;

        let mut dec = root.sub("dec");
        let dec_in = stage(&mut dec, "in", config.latent_channels, w(levels), 1)?;
        let dec_up = (0..levels)
            .rev()
            .map(|l| stage(&mut dec, &format!("up{l}"), w(l + 1), w(l), 1))
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv2d::new(&mut dec, "out", w(0), 3, 3, 1)?;

        Ok(Self {
            config,
            latent_scale: 1.0,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
        })
    }

    pub fn factor(&self) -> usize {
        self.config.downsample
    }

    fn check_image<S: Scalar>(&self, x: &Var<'_, S>) -> Result<()> {
        let s = x.shape();
        let f = self.factor();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err!("codec expects [N, 3, H, W], got {s:?}"));
        }
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(shape_err!(
                "image {}x{} is not a multiple of the codec factor {f}; pad it first",
                s[3],
                s[2]
            ));
        }
        Ok(())
    }

    /// Standardized latent and the encoder taps.
    pub fn encode<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        x: &Var<'g, S>,
    ) -> Result<(Var<'g, S>, Taps<'g, S>)> {
        self.check_image(x)?;
        let levels = self.config.levels();
        let mut taps = vec![None; levels + 1];
        let mut h = stage_fwd(p, &self.enc_in, x)?;
        if self.config.tap_levels.contains(&0) {
            taps[0] = Some(h);
        }
        for (i, st) in self.enc_down.iter().enumerate() {
            h = stage_fwd(p, st, &h)?;
            if self.config.tap_levels.contains(&(i + 1)) {
                taps[i + 1] = Some(h);
            }
        }
        let z = self
            .enc_out
            .forward(p, &h)?
            .mul_scalar(S::from_f64(self.latent_scale as f64));
        Ok((z, Taps { levels: taps }))
    }

    /// Decodes a standardized latent to an image in `[0, 1]`. With
    /// `fusion`, decoder features at each tap level are replaced by the
    /// fusion output before the next layer.
    pub fn decode<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        z: &Var<'g, S>,
        fusion: Option<(&Taps<'g, S>, &dyn DecoderFusion<'g, S>)>,
    ) -> Result<Var<'g, S>> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return Err(shape_err!(
                "codec latent must be [N, {}, h, w], got {s:?}",
                self.config.latent_channels
            ));
        }
        let levels = self.config.levels();
        let mut h = stage_fwd(
            p,
            &self.dec_in,
            &z.mul_scalar(S::from_f64(1.0 / self.latent_scale as f64)),
        )?;
        h = self.fuse_at(levels, h, fusion)?;
        for (i, st) in self.dec_up.iter().enumerate() {
            let level = levels - 1 - i;
            h = stage_fwd(p, st, &h.upsample2x()?)?;
            h = self.fuse_at(level, h, fusion)?;
        }
        Ok(self.dec_out.forward(p, &h)?.sigmoid())
    }

    fn fuse_at<'g, S: Scalar>(
        &self,
        level: usize,
        f_d: Var<'g, S>,
        fusion: Option<(&Taps<'g, S>, &dyn DecoderFusion<'g, S>)>,
    ) -> Result<Var<'g, S>> {
        let Some((taps, fuse)) = fusion else {
            return Ok(f_d);
        };
        if !self.config.tap_levels.contains(&level) {
            return Ok(f_d);
        }
        let f_e = taps
            .get(level)
            .ok_or_else(|| shape_err!("encoder tap at level {level} is missing"))?;
        if f_e.shape() != f_d.shape() {
            return Err(shape_err!(
                "tap shape mismatch at level {level}: encoder {:?}, decoder {:?}",
                f_e.shape(),
                f_d.shape()
            ));
        }
        fuse.fuse(level, f_e, &f_d)
    }

    /// Frozen encode of a `[N, 3, H, W]` batch.
    pub fn encode_tensor(&self, store: &ParamStore, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let (z, _) = self.encode(&p, &g.constant(x))?;
        Ok(z.value())
    }

    /// Frozen plain decode.
    pub fn decode_tensor(&self, store: &ParamStore, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        Ok(self.decode(&p, &g.constant(z), None)?.value())
    }

    /// Sets the latent scale to `1 / std` of the raw latents of `x`.
    pub fn calibrate_scale(&mut self, store: &ParamStore, x: &Tensor<f32>) -> Result<f32> {
        self.latent_scale = 1.0;
        let z = self.encode_tensor(store, x)?;
        let n = z.numel() as f64;
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        self.latent_scale = (1.0 / var.sqrt().max(1e-6)) as f32;
        Ok(self.latent_scale)
    }
}

fn stage_fwd<'g, S: Scalar>(p: &Bound<'g, S>, st: &Stage, x: &Var<'g, S>) -> Result<Var<'g, S>> {
    let h = st.a.forward(p, x)?.silu();
    Ok(st.b.forward(p, &h)?.silu())
}

#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

pub const MIN_CODEC_PATCHES: usize = 256;

/// Trains encoder and decoder jointly on L1 reconstruction of `patches`
/// (each `[3, P, P]`), then calibrates the latent scale. Returns the
/// per-step loss curve.
pub fn train_codec(
    codec: &mut Codec,
    store: &mut ParamStore,
    patches: &[Tensor<f32>],
    cfg: &CodecTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("codec training set is empty".into()));
    }
    if patches.len() < MIN_CODEC_PATCHES {
        return Err(Error::InvalidArgument(format!(
            "codec training needs at least {MIN_CODEC_PATCHES} patches, got {}",
            patches.len()
        )));
    }
    let shape = patches[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 || patches.iter().any(|p| p.shape() != shape.as_slice()) {
        return Err(shape_err!("codec patches must share one [3, P, P] shape"));
    }
    codec.latent_scale = 1.0;
    let trainable = |n: &str| n.starts_with(ENCODER_PREFIX) || n.starts_with(DECODER_PREFIX);
    let mut adam = Adam::for_store(AdamConfig::with_lr(cfg.lr), store, trainable);
    let mut rng = seeded_rng(cfg.seed, "codec-train");
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<&Tensor<f32>> = (0..cfg.batch)
            .map(|_| &patches[rng.random_range(0..patches.len())])
            .collect();
        let x = stack(&picks)?;
        let g = Graph::new();
        let p = store.bind(&g, trainable);
        let xv = g.constant(&x);
        let (z, _) = codec.encode(&p, &xv)?;
        let y = codec.decode(&p, &z, None)?;
        let loss = crate::nn::l1(&y, &xv)?;
        let lv = loss.item() as f64;
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                what: "codec L1".into(),
            });
        }
        g.backward(loss)?;
        let mut grads = p.grads();
        drop(p);
        adam.step(store, &mut grads)?;
        curve.push(lv);
        on_step(step, lv);
    }
    let calib: Vec<&Tensor<f32>> = patches.iter().take(MIN_CODEC_PATCHES).collect();
    codec.calibrate_scale(store, &stack(&calib)?)?;
    Ok(curve)
}

/// Stacks `[C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| shape_err!("nothing to stack"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(shape_err!(
                "stack of mixed shapes {:?} and {:?}",
                first.shape(),
                t.shape()
            ));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(&shape, data)?)
}
