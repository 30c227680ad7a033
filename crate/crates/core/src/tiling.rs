//! Overlapping-tile reverse sampling: per-step noise predictions on latent
//! tiles are fused into one full-resolution prediction with normalized
//! Gaussian weights.

use autodiff::Tensor;
use rand::Rng;

use crate::diffusion::{reverse_sample, sampler_step, NoisePredictor, NoiseSchedule, SamplerKind};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TileLayout {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub stride: usize,
    pub sigma: f64,
    /// Top-left corners `(y, x)` in fixed summation order.
    pub regions: Vec<(usize, usize)>,
    /// Tile-local Gaussian weights, `tile * tile`, shared by every tile.
    pub kernel: Vec<f64>,
    /// `sum_n omega_n`, full resolution.
    pub normalizer: Vec<f64>,
}

fn axis_offsets(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut offs: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + tile <= dim)
        .collect();
    if offs.last().is_none_or(|&o| o + tile < dim) {
        offs.push(dim - tile);
    }
    offs
}

/// Default Gaussian width for a tile.
pub fn default_sigma(tile: usize) -> f64 {
    tile as f64 / 4.0
}

pub fn make_layout(
    height: usize,
    width: usize,
    tile: usize,
    stride: usize,
    sigma: f64,
) -> Result<TileLayout> {
    if tile == 0 || tile > height.min(width) {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} does not fit a {height}x{width} latent"
        )));
    }
    if stride == 0 || stride > tile {
        return Err(Error::InvalidArgument(format!(
            "stride must lie in 1..={tile}, got {stride}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tile sigma must be positive, got {sigma}"
        )));
    }
    let c = (tile as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..tile)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let kernel: Vec<f64> = (0..tile * tile)
        .map(|i| g[i / tile] * g[i % tile])
        .collect();
    let ys = axis_offsets(height, tile, stride);
    let xs = axis_offsets(width, tile, stride);
    let regions: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect();
    let mut normalizer = vec![0.0; height * width];
    for &(y0, x0) in &regions {
        for dy in 0..tile {
            for dx in 0..tile {
                normalizer[(y0 + dy) * width + x0 + dx] += kernel[dy * tile + dx];
            }
        }
    }
    Ok(TileLayout {
        height,
        width,
        tile,
        stride,
        sigma,
        regions,
        kernel,
        normalizer,
    })
}

impl TileLayout {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Full-resolution `omega_n`, zero outside the tile.
    pub fn weight_map(&self, n: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.height * self.width];
        let (y0, x0) = self.regions[n];
        for dy in 0..self.tile {
            for dx in 0..self.tile {
                w[(y0 + dy) * self.width + x0 + dx] = self.kernel[dy * self.tile + dx];
            }
        }
        w
    }

    /// `omega_n / omega_hat` on the tile's own window.
    pub fn normalized_weights(&self, n: usize) -> Vec<f64> {
        let (y0, x0) = self.regions[n];
        (0..self.tile * self.tile)
            .map(|i| {
                let (dy, dx) = (i / self.tile, i % self.tile);
                self.kernel[i] / self.normalizer[(y0 + dy) * self.width + x0 + dx]
            })
            .collect()
    }

    /// Cuts a `[1, C, H, W]` tensor into a `[n_tiles, C, tile, tile]` batch.
    pub fn extract(&self, full: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = self.check_full(full)?;
        let t = self.tile;
        let mut data = Vec::with_capacity(self.len() * c * t * t);
        for &(y0, x0) in &self.regions {
            for ch in 0..c {
                for dy in 0..t {
                    let base = (ch * self.height + y0 + dy) * self.width + x0;
                    data.extend_from_slice(&full.data()[base..base + t]);
                }
            }
        }
        Ok(Tensor::new(&[self.len(), c, t, t], data)?)
    }

    fn check_full(&self, full: &Tensor<f32>) -> Result<usize> {
        match full.shape() {
            [1, c, h, w] if *h == self.height && *w == self.width => Ok(*c),
            s => Err(shape_err!(
                "expected [1, C, {}, {}] latent, got {s:?}",
                self.height,
                self.width
            )),
        }
    }
}

/// Zero-padded placement of a tile-local `[C, tile, tile]` array into the
/// full `[C, H, W]` grid at region `n`.
pub fn place(layout: &TileLayout, n: usize, tile: &[f32], channels: usize) -> Vec<f32> {
    let (h, w, t) = (layout.height, layout.width, layout.tile);
    let (y0, x0) = layout.regions[n];
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        for dy in 0..t {
            let dst = (c * h + y0 + dy) * w + x0;
            let src = (c * t + dy) * t;
            out[dst..dst + t].copy_from_slice(&tile[src..src + t]);
        }
    }
    out
}

/// Fuses per-tile predictions `[n_tiles, C, tile, tile]` into `[1, C, H, W]`
/// as a convex combination, accumulating tiles in layout order.
pub fn aggregate_noise(preds: &Tensor<f32>, layout: &TileLayout) -> Result<Tensor<f32>> {
    let s = preds.shape();
    let t = layout.tile;
    if s.len() != 4 || s[0] != layout.len() || s[2] != t || s[3] != t {
        return Err(shape_err!(
            "expected [{}, C, {t}, {t}] tile predictions, got {s:?}",
            layout.len()
        ));
    }
    let c = s[1];
    let (h, w) = (layout.height, layout.width);
    let mut acc = vec![0.0f64; c * h * w];
    let per_tile = c * t * t;
    for (n, &(y0, x0)) in layout.regions.iter().enumerate() {
        let nw = layout.normalized_weights(n);
        let tile = &preds.data()[n * per_tile..(n + 1) * per_tile];
        for ch in 0..c {
            for dy in 0..t {
                for dx in 0..t {
                    let v = tile[(ch * t + dy) * t + dx] as f64;
                    acc[(ch * h + y0 + dy) * w + x0 + dx] += nw[dy * t + dx] * v;
                }
            }
        }
    }
    Ok(Tensor::new(
        &[1, c, h, w],
        acc.into_iter().map(|v| v as f32).collect(),
    )?)
}

/// Tiles evaluated per predictor call.
const TILE_BATCH: usize = 64;

/// Noise prediction over every tile, batched, then fused.
pub fn tiled_predict(
    model: &dyn NoisePredictor,
    z: &Tensor<f32>,
    cond: &Tensor<f32>,
    t: usize,
    layout: &TileLayout,
) -> Result<Tensor<f32>> {
    let zt = layout.extract(z)?;
    let ct = layout.extract(cond)?;
    let n = layout.len();
    let mut parts = Vec::new();
    for start in (0..n).step_by(TILE_BATCH) {
        let len = TILE_BATCH.min(n - start);
        parts.push(model.predict(&zt.narrow(0, start, len)?, t, &ct.narrow(0, start, len)?)?);
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    aggregate_noise(&Tensor::cat(&refs, 0)?, layout)
}

/// Patch-aggregation reverse sampling from `init` (the `Z_T` draw). Latents
/// smaller than one tile use plain full-image sampling.
#[allow(clippy::too_many_arguments)]
pub fn tiled_reverse_sample(
    model: &dyn NoisePredictor,
    z_lq: &Tensor<f32>,
    init: Tensor<f32>,
    layout: Option<&TileLayout>,
    kind: SamplerKind,
    steps: usize,
    rng: &mut impl Rng,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    if init.shape() != z_lq.shape() {
        return Err(shape_err!(
            "initial noise {:?} vs condition {:?}",
            init.shape(),
            z_lq.shape()
        ));
    }
    let Some(layout) = layout else {
        return reverse_sample(model, z_lq, init, kind, steps, rng, sched);
    };
    let ts = sched.sampling_timesteps(steps)?;
    let mut z = init;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = tiled_predict(model, &z, z_lq, t, layout)?;
        z = sampler_step(kind, &z, &eps, t, t_prev, rng, sched)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_cover_and_clamp() {
        assert_eq!(axis_offsets(32, 16, 8), vec![0, 8, 16]);
        assert_eq!(axis_offsets(30, 8, 4), vec![0, 4, 8, 12, 16, 20, 22]);
        assert_eq!(axis_offsets(8, 8, 4), vec![0]);
    }

    #[test]
    fn layout_errors() {
        assert!(make_layout(8, 8, 9, 4, 2.0).is_err());
        assert!(make_layout(8, 8, 4, 0, 2.0).is_err());
        assert!(make_layout(8, 8, 4, 5, 2.0).is_err());
        assert!(make_layout(8, 8, 4, 2, 0.0).is_err());
    }

    #[test]
    fn extract_then_place_inverts_window() {
        let l = make_layout(6, 7, 4, 2, 1.0).unwrap();
        let full = Tensor::new(&[1, 2, 6, 7], (0..84).map(|v| v as f32).collect()).unwrap();
        let tiles = l.extract(&full).unwrap();
        let n = 3;
        let per = 2 * 16;
        let placed = place(&l, n, &tiles.data()[n * per..(n + 1) * per], 2);
        let (y0, x0) = l.regions[n];
        for c in 0..2 {
            for y in 0..6 {
                for x in 0..7 {
                    let inside = (y0..y0 + 4).contains(&y) && (x0..x0 + 4).contains(&x);
                    let v = placed[(c * 6 + y) * 7 + x];
                    let want = if inside {
                        full.data()[(c * 6 + y) * 7 + x]
                    } else {
                        0.0
                    };
                    assert_eq!(v, want);
                }
            }
        }
    }
}
