//! Trainable trilinear voxel grid, differentiable volume rendering,
//! regularizers, and the pixel/patch ray samplers used in stage one.

use autodiff::{Bound, CustomBackward, CustomOp, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::image::Image;
use crate::nn::mse;
use crate::scene::{Camera, Vec3, ViewSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Ray clipped to the unit cube; `near == far == 0` when it misses.
    pub fn unit_cube(origin: Vec3, direction: Vec3) -> Self {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let inv = 1.0 / direction[i];
            let (mut a, mut b) = ((0.0 - origin[i]) * inv, (1.0 - origin[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            if a.is_nan() || b.is_nan() {
                // parallel to the slab: inside it or not at all
                if origin[i] < 0.0 || origin[i] > 1.0 {
                    t1 = -1.0;
                }
                continue;
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        let (near, far) = if t1 > t0 { (t0, t1) } else { (0.0, 0.0) };
        Self {
            origin,
            direction,
            near,
            far,
        }
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        (self.far > self.near).then_some((self.near, self.far))
    }

    pub fn at(&self, t: f64) -> Vec3 {
        std::array::from_fn(|i| self.origin[i] + t * self.direction[i])
    }
}

/// Alpha compositing of one ray. Returns the color and the sample weights.
pub fn composite_ray(
    sigmas: &[f64],
    deltas: &[f64],
    colors: &[Vec3],
    background: Vec3,
) -> (Vec3, Vec<f64>) {
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(sigmas.len());
    for i in 0..sigmas.len() {
        let alpha = 1.0 - (-sigmas[i] * deltas[i]).exp();
        let w = trans * alpha;
        for c in 0..3 {
            rgb[c] += w * colors[i][c];
        }
        weights.push(w);
        trans *= 1.0 - alpha;
    }
    for c in 0..3 {
        rgb[c] += trans * background[c];
    }
    (rgb, weights)
}

/// Sample positions along a batch of rays, `samples` per ray, ray-major.
#[derive(Debug, Clone)]
pub struct RaySampleBatch {
    pub n_rays: usize,
    pub samples: usize,
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub positions: Vec<Vec3>,
}

/// Stratified samples: one per equal-width bin of `[near, far]`, jittered
/// within the bin when `rng` is given and at bin midpoints otherwise.
/// Rays that miss the cube get zero-width intervals, so they composite to
/// the background.
pub fn stratified_samples(
    rays: &[Ray],
    samples: usize,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> RaySampleBatch {
    let total = rays.len() * samples;
    let mut t = Vec::with_capacity(total);
    let mut deltas = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    for ray in rays {
        match ray.bounds() {
            Some((near, far)) => {
                let bin = (far - near) / samples as f64;
                for i in 0..samples {
                    let u = match rng.as_deref_mut() {
                        Some(r) => r.random::<f64>(),
                        None => 0.5,
                    };
                    let ti = near + (i as f64 + u) * bin;
                    t.push(ti);
                    deltas.push(bin);
                    positions.push(ray.at(ti));
                }
            }
            None => {
                for _ in 0..samples {
                    t.push(0.0);
                    deltas.push(0.0);
                    positions.push(ray.origin);
                }
            }
        }
    }
    RaySampleBatch {
        n_rays: rays.len(),
        samples,
        t,
        deltas,
        positions,
    }
}

/// Grid channels: density logit then three color logits.
pub const GRID_CHANNELS: usize = 4;

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub param: ParamId,
}

pub const GRID_PARAM: &str = "grid.cells";

impl VoxelGrid {
    /// Registers a `[4, R, R, R]` grid: density logit -2, color logits 0.
    pub fn new(store: &mut ParamStore, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::Config(format!(
                "grid resolution must be >= 2, got {resolution}"
            )));
        }
        let r3 = resolution.pow(3);
        let mut data = vec![0.0f32; GRID_CHANNELS * r3];
        data[..r3].fill(-2.0);
        let param = store.add(
            GRID_PARAM,
            Tensor::new(&[GRID_CHANNELS, resolution, resolution, resolution], data)?,
        )?;
        Ok(Self { resolution, param })
    }

    /// Looks up the grid in an existing store.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let param = store
            .find(GRID_PARAM)
            .ok_or_else(|| Error::MissingTensors(vec![GRID_PARAM.into()]))?;
        let s = store.get(param).shape();
        if s.len() != 4 || s[0] != GRID_CHANNELS || s[1] != s[2] || s[2] != s[3] {
            return Err(shape_err!("grid tensor has shape {s:?}"));
        }
        Ok(Self {
            resolution: s[1],
            param,
        })
    }

    /// Trilinearly interpolated logits, `[4, P]`.
    pub fn sample<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        positions: &[Vec3],
    ) -> Result<Var<'g, S>> {
        grid_sample(&p.var(self.param), self.resolution, positions)
    }

    /// Renders the sampled rays; `[3, n_rays]`.
    pub fn render<'g, S: Scalar>(
        &self,
        p: &Bound<'g, S>,
        batch: &RaySampleBatch,
        background: Vec3,
    ) -> Result<Var<'g, S>> {
        let logits = self.sample(p, &batch.positions)?;
        let sigma = logits
            .slice(0, 0, 1)?
            .softplus()
            .reshape(&[batch.n_rays, batch.samples])?;
        let color = logits
            .slice(0, 1, 3)?
            .sigmoid()
            .reshape(&[3, batch.n_rays, batch.samples])?;
        composite(&sigma, &color, &batch.deltas, background)
    }

    /// Deterministic full-image render with midpoint samples.
    pub fn render_image(
        &self,
        store: &ParamStore,
        camera: &Camera,
        samples: usize,
        background: Vec3,
    ) -> Result<Image> {
        let (w, h) = (camera.width, camera.height);
        let mut out = Image::filled(w, h, [0.0; 3]);
        let rows_per_chunk = (4096 / w).max(1);
        for y0 in (0..h).step_by(rows_per_chunk) {
            let rows = rows_per_chunk.min(h - y0);
            let mut rays = Vec::with_capacity(rows * w);
            for y in y0..y0 + rows {
                for x in 0..w {
                    rays.push(camera.pixel_ray(x, y)?);
                }
            }
            let batch = stratified_samples(&rays, samples, None);
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let rgb = self.render(&p, &batch, background)?.value();
            let n = rays.len();
            for (i, _) in rays.iter().enumerate() {
                let (y, x) = (y0 + i / w, i % w);
                out.set_pixel(
                    y,
                    x,
                    [rgb.data()[i], rgb.data()[n + i], rgb.data()[2 * n + i]],
                );
            }
        }
        Ok(out)
    }
}

/// Corner indices and weights of a trilinear lookup at `p`.
pub fn trilinear_corners(resolution: usize, p: Vec3) -> [(usize, f64); 8] {
    let r = resolution;
    let mut lo = [0usize; 3];
    let mut fr = [0.0f64; 3];
    for a in 0..3 {
        let u = (p[a] * r as f64 - 0.5).clamp(0.0, (r - 1) as f64);
        let i = (u.floor() as usize).min(r - 2);
        lo[a] = i;
        fr[a] = u - i as f64;
    }
    std::array::from_fn(|k| {
        let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
        let idx = ((lo[0] + dx) * r + lo[1] + dy) * r + lo[2] + dz;
        let w = (if dx == 1 { fr[0] } else { 1.0 - fr[0] })
            * (if dy == 1 { fr[1] } else { 1.0 - fr[1] })
            * (if dz == 1 { fr[2] } else { 1.0 - fr[2] });
        (idx, w)
    })
}

struct GridSampleOp {
    corners: Vec<[(usize, f64); 8]>,
    cells: usize,
}

impl<S: Scalar> CustomOp<S> for GridSampleOp {
    fn name(&self) -> &'static str {
        "grid_sample"
    }

    fn backward(&self, ctx: &CustomBackward<'_, S>) -> Vec<Option<Vec<S>>> {
        let n = self.corners.len();
        let mut dg = vec![S::zero(); GRID_CHANNELS * self.cells];
        for c in 0..GRID_CHANNELS {
            let go = &ctx.grad_output[c * n..(c + 1) * n];
            let dst = &mut dg[c * self.cells..(c + 1) * self.cells];
            for (corners, &g) in self.corners.iter().zip(go) {
                for &(idx, w) in corners {
                    dst[idx] += g * S::from_f64(w);
                }
            }
        }
        vec![Some(dg)]
    }
}

/// Trilinear lookup of a `[4, R, R, R]` grid at world positions in the
/// unit cube; cell `i` is centered at `(i + 0.5) / R`.
pub fn grid_sample<'g, S: Scalar>(
    grid: &Var<'g, S>,
    resolution: usize,
    positions: &[Vec3],
) -> Result<Var<'g, S>> {
    let r = resolution;
    if grid.shape() != [GRID_CHANNELS, r, r, r] {
        return Err(shape_err!(
            "grid_sample expects [4, {r}, {r}, {r}], got {:?}",
            grid.shape()
        ));
    }
    let cells = r * r * r;
    let corners: Vec<_> = positions.iter().map(|&p| trilinear_corners(r, p)).collect();
    let g = grid.value();
    let gd = g.data();
    let n = positions.len();
    let mut out = vec![S::zero(); GRID_CHANNELS * n];
    for c in 0..GRID_CHANNELS {
        let src = &gd[c * cells..(c + 1) * cells];
        for (i, cs) in corners.iter().enumerate() {
            let mut acc = 0.0f64;
            for &(idx, w) in cs {
                acc += w * src[idx].as_f64();
            }
            out[c * n + i] = S::from_f64(acc);
        }
    }
    Ok(grid.graph().custom(
        &[*grid],
        &[GRID_CHANNELS, n],
        out,
        Box::new(GridSampleOp { corners, cells }),
    )?)
}

struct CompositeOp {
    deltas: Vec<f64>,
    background: Vec3,
    n_rays: usize,
    samples: usize,
}

impl<S: Scalar> CustomOp<S> for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, ctx: &CustomBackward<'_, S>) -> Vec<Option<Vec<S>>> {
        let (nr, ns) = (self.n_rays, self.samples);
        let sigma = ctx.inputs[0];
        let color = ctx.inputs[1];
        let go = ctx.grad_output;
        let mut ds = vec![S::zero(); nr * ns];
        let mut dc = vec![S::zero(); 3 * nr * ns];
        let mut alpha = vec![0.0f64; ns];
        let mut trans = vec![0.0f64; ns + 1];
        for r in 0..nr {
            let base = r * ns;
            trans[0] = 1.0;
            for i in 0..ns {
                alpha[i] = 1.0 - (-sigma[base + i].as_f64() * self.deltas[base + i]).exp();
                trans[i + 1] = trans[i] * (1.0 - alpha[i]);
            }
            let g: [f64; 3] = std::array::from_fn(|c| go[c * nr + r].as_f64());
            // suffix = sum_{k > i} w_k (g . c_k) + T_final (g . bg)
            let mut suffix: f64 =
                (0..3).map(|c| g[c] * self.background[c]).sum::<f64>() * trans[ns];
            for i in (0..ns).rev() {
                let w = trans[i] * alpha[i];
                let gc: f64 = (0..3)
                    .map(|c| g[c] * color[(c * nr + r) * ns + i].as_f64())
                    .sum();
                for c in 0..3 {
                    dc[(c * nr + r) * ns + i] = S::from_f64(w * g[c]);
                }
                ds[base + i] = S::from_f64(self.deltas[base + i] * (trans[i + 1] * gc - suffix));
                suffix += w * gc;
            }
        }
        vec![Some(ds), Some(dc)]
    }
}

/// Differentiable alpha compositing. `sigma: [R, S]`, `color: [3, R, S]`,
/// output `[3, R]`.
pub fn composite<'g, S: Scalar>(
    sigma: &Var<'g, S>,
    color: &Var<'g, S>,
    deltas: &[f64],
    background: Vec3,
) -> Result<Var<'g, S>> {
    let ss = sigma.shape();
    if ss.len() != 2 || color.shape() != [3, ss[0], ss[1]] || deltas.len() != ss[0] * ss[1] {
        return Err(shape_err!(
            "composite shapes: sigma {ss:?}, color {:?}, {} deltas",
            color.shape(),
            deltas.len()
        ));
    }
    let (nr, ns) = (ss[0], ss[1]);
    let sv = sigma.value();
    let cv = color.value();
    let mut out = vec![S::zero(); 3 * nr];
    let mut sig = vec![0.0; ns];
    let mut cols = vec![[0.0; 3]; ns];
    for r in 0..nr {
        for i in 0..ns {
            sig[i] = sv.data()[r * ns + i].as_f64();
            cols[i] = std::array::from_fn(|c| cv.data()[(c * nr + r) * ns + i].as_f64());
        }
        let (rgb, _) = composite_ray(&sig, &deltas[r * ns..(r + 1) * ns], &cols, background);
        for c in 0..3 {
            out[c * nr + r] = S::from_f64(rgb[c]);
        }
    }
    let op = CompositeOp {
        deltas: deltas.to_vec(),
        background,
        n_rays: nr,
        samples: ns,
    };
    Ok(sigma
        .graph()
        .custom(&[*sigma, *color], &[3, nr], out, Box::new(op))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegWeights {
    pub tv: f64,
    pub l1: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self { tv: 1e-3, l1: 1e-4 }
    }
}

/// Returns `(tv, l1)`: mean absolute forward difference of the decoded
/// density over all adjacent cell pairs, and mean decoded density.
pub fn reg_terms<'g, S: Scalar>(grid: &Var<'g, S>) -> Result<(Var<'g, S>, Var<'g, S>)> {
    let s = grid.shape();
    if s.len() != 4 || s[0] != GRID_CHANNELS {
        return Err(shape_err!(
            "regularizers expect a [4, R, R, R] grid, got {s:?}"
        ));
    }
    let r = s[1];
    let density = grid.slice(0, 0, 1)?.softplus();
    let mut tv_sum: Option<Var<'g, S>> = None;
    for axis in 1..4 {
        let d = density
            .slice(axis, 1, r - 1)?
            .sub(&density.slice(axis, 0, r - 1)?)?
            .abs()
            .sum();
        tv_sum = Some(match tv_sum {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    let pairs = 3 * r * r * (r - 1);
    let tv = tv_sum
        .expect("three axes")
        .mul_scalar(S::from_f64(1.0 / pairs as f64));
    Ok((tv, density.mean()))
}

pub fn reg_losses<'g, S: Scalar>(grid: &Var<'g, S>, w: RegWeights) -> Result<Var<'g, S>> {
    let (tv, l1) = reg_terms(grid)?;
    Ok(tv
        .mul_scalar(S::from_f64(w.tv))
        .add(&l1.mul_scalar(S::from_f64(w.l1)))?)
}

/// Rendering MSE plus weighted regularizers.
pub fn nerf_loss<'g, S: Scalar>(
    rendered: &Var<'g, S>,
    target: &Var<'g, S>,
    grid: &Var<'g, S>,
    w: RegWeights,
) -> Result<Var<'g, S>> {
    if rendered.shape() != target.shape() {
        return Err(shape_err!(
            "nerf_loss: rendered {:?} vs target {:?}",
            rendered.shape(),
            target.shape()
        ));
    }
    Ok(mse(rendered, target)?.add(&reg_losses(grid, w)?)?)
}

/// Rays plus `[3, n]` target colors.
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Tensor<f32>,
}

fn targets_from(image: &Image, pixels: &[(usize, usize)], out: &mut [Vec<f32>; 3]) {
    for &(x, y) in pixels {
        for (c, o) in out.iter_mut().enumerate() {
            o.push(image.get(c, y, x));
        }
    }
}

fn pack(planes: [Vec<f32>; 3]) -> Result<Tensor<f32>> {
    let n = planes[0].len();
    let data = planes.into_iter().flatten().collect();
    Ok(Tensor::new(&[3, n], data)?)
}

/// `n` uniformly random pixels across the given views.
pub fn sample_rays_pixel(
    views: &ViewSet,
    view_ids: &[usize],
    n: usize,
    rng: &mut impl Rng,
) -> Result<RayBatch> {
    if view_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "no views to sample rays from".into(),
        ));
    }
    let mut rays = Vec::with_capacity(n);
    let mut planes: [Vec<f32>; 3] = Default::default();
    for _ in 0..n {
        let v = view_ids[rng.random_range(0..view_ids.len())];
        let cam = &views.cameras[v];
        let (x, y) = (
            rng.random_range(0..cam.width),
            rng.random_range(0..cam.height),
        );
        rays.push(cam.pixel_ray(x, y)?);
        targets_from(&views.images[v], &[(x, y)], &mut planes);
    }
    Ok(RayBatch {
        rays,
        targets: pack(planes)?,
    })
}

/// Where a sub-patch lives: view, target-patch origin in the image, and
/// the sub-patch offset within the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubPatch {
    pub view: usize,
    pub origin: (usize, usize),
    pub offset: (usize, usize),
    pub width: usize,
    pub height: usize,
}

impl SubPatch {
    /// Image-space `(x, y)` of every pixel, row-major.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let (x0, y0) = (self.origin.0 + self.offset.0, self.origin.1 + self.offset.1);
        (y0..y0 + self.height)
            .flat_map(|y| (x0..x0 + self.width).map(move |x| (x, y)))
            .collect()
    }
}

/// Yields sub-patches that tile a target patch in row-major order; a new
/// view and target origin are drawn uniformly once the previous target is
/// covered.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    pub target: (usize, usize),
    pub sub: (usize, usize),
    current: Option<(usize, (usize, usize))>,
    next_index: usize,
}

impl PatchSampler {
    pub fn new(target: (usize, usize), sub: (usize, usize)) -> Result<Self> {
        if sub.0 == 0 || sub.1 == 0 || target.0 % sub.0 != 0 || target.1 % sub.1 != 0 {
            return Err(Error::Config(format!(
                "sub-patch {}x{} must evenly tile target {}x{}",
                sub.0, sub.1, target.0, target.1
            )));
        }
        Ok(Self {
            target,
            sub,
            current: None,
            next_index: 0,
        })
    }

    /// Sub-patches needed to cover one target.
    pub fn pieces(&self) -> usize {
        (self.target.0 / self.sub.0) * (self.target.1 / self.sub.1)
    }

    pub fn next(
        &mut self,
        views: &ViewSet,
        view_ids: &[usize],
        rng: &mut impl Rng,
    ) -> Result<SubPatch> {
        if view_ids.is_empty() {
            return Err(Error::InvalidArgument(
                "no views to sample patches from".into(),
            ));
        }
        let (view, origin) = match self.current {
            Some(c) => c,
            None => {
                let v = view_ids[rng.random_range(0..view_ids.len())];
                let img = &views.images[v];
                if img.width() < self.target.0 || img.height() < self.target.1 {
                    return Err(Error::InvalidArgument(
                        "patch target larger than the image".into(),
                    ));
                }
                let o = (
                    rng.random_range(0..=img.width() - self.target.0),
                    rng.random_range(0..=img.height() - self.target.1),
                );
                self.current = Some((v, o));
                (v, o)
            }
        };
        let cols = self.target.0 / self.sub.0;
        let k = self.next_index;
        let offset = ((k % cols) * self.sub.0, (k / cols) * self.sub.1);
        self.next_index += 1;
        if self.next_index == self.pieces() {
            self.next_index = 0;
            self.current = None;
        }
        Ok(SubPatch {
            view,
            origin,
            offset,
            width: self.sub.0,
            height: self.sub.1,
        })
    }
}

/// Rays and targets for a sub-patch.
pub fn sample_rays_patch(views: &ViewSet, patch: &SubPatch) -> Result<RayBatch> {
    let cam = &views.cameras[patch.view];
    let pixels = patch.pixels();
    let rays = crate::scene::generate_rays(cam, &pixels)?;
    let mut planes: [Vec<f32>; 3] = Default::default();
    targets_from(&views.images[patch.view], &pixels, &mut planes);
    Ok(RayBatch {
        rays,
        targets: pack(planes)?,
    })
}

/// Accumulates rendered sub-patches until a full target patch is covered.
#[derive(Debug, Clone)]
pub struct SubPatchBuffer {
    rendered: Image,
    mask: Vec<bool>,
    key: Option<(usize, (usize, usize))>,
}

/// A completed low-quality rendering with the matching reference crop.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub view: usize,
    pub origin: (usize, usize),
    pub lq: Image,
    pub hq: Image,
}

impl SubPatchBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            rendered: Image::filled(width, height, [0.0; 3]),
            mask: vec![false; width * height],
            key: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn filled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Stores a rendered sub-patch (`[3, h*w]` row-major colors). Rejects
    /// overlaps and sub-patches from a different target.
    pub fn insert(&mut self, patch: &SubPatch, colors: &[f32]) -> Result<()> {
        let (w, h) = (self.rendered.width(), self.rendered.height());
        let n = patch.width * patch.height;
        if colors.len() != 3 * n {
            return Err(shape_err!(
                "sub-patch needs {} values, got {}",
                3 * n,
                colors.len()
            ));
        }
        if patch.offset.0 + patch.width > w || patch.offset.1 + patch.height > h {
            return Err(shape_err!("sub-patch exceeds the {w}x{h} buffer"));
        }
        let key = (patch.view, patch.origin);
        match self.key {
            Some(k) if k != key => {
                return Err(Error::InvalidArgument(
                    "sub-patch belongs to a different target".into(),
                ))
            }
            _ => self.key = Some(key),
        }
        for y in 0..patch.height {
            for x in 0..patch.width {
                if self.mask[(patch.offset.1 + y) * w + patch.offset.0 + x] {
                    return Err(Error::InvalidArgument("sub-patches overlap".into()));
                }
            }
        }
        for y in 0..patch.height {
            for x in 0..patch.width {
                let (ix, iy) = (patch.offset.0 + x, patch.offset.1 + y);
                self.mask[iy * w + ix] = true;
                let i = y * patch.width + x;
                self.rendered
                    .set_pixel(iy, ix, [colors[i], colors[n + i], colors[2 * n + i]]);
            }
        }
        Ok(())
    }

    /// Emits the completed pair and resets, or `None` while incomplete.
    pub fn take(&mut self, views: &ViewSet) -> Result<Option<PatchPair>> {
        if !self.is_complete() {
            return Ok(None);
        }
        let (view, origin) = self.key.expect("complete buffer has a key");
        let (w, h) = (self.rendered.width(), self.rendered.height());
        let hq = views.images[view].crop(origin.0, origin.1, w, h)?;
        let lq = std::mem::replace(&mut self.rendered, Image::filled(w, h, [0.0; 3]));
        self.mask.fill(false);
        self.key = None;
        Ok(Some(PatchPair {
            view,
            origin,
            lq,
            hq,
        }))
    }
}
