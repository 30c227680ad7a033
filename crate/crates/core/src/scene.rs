//! Analytic textured scene inside the unit cube, pinhole cameras, and the
//! supersampled reference renderer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::radiance_field::{composite_ray, Ray};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Density inside every primitive, per unit length.
pub const OPAQUE_DENSITY: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
}

impl Shape {
    pub fn contains(&self, p: Vec3) -> bool {
        match self {
            Shape::Sphere { center, radius } => {
                let d = sub(p, *center);
                dot(d, d) <= radius * radius
            }
            Shape::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Shape::Sphere { center, radius } => {
                (center.map(|c| c - radius), center.map(|c| c + radius))
            }
            Shape::Box { min, max } => (*min, *max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    /// Cells of side `1 / freq`; parity of the summed cell indices picks the tone.
    Checker,
    /// `freq` cycles per unit along `axis`; first half of each cycle is lit.
    Stripes { axis: Vec3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub pattern: Pattern,
    pub freq: f64,
    /// Fraction by which the dark tone is dimmed relative to the base color.
    pub contrast: f64,
}

impl Texture {
    /// True when `p` falls on the base (lit) tone.
    pub fn lit(&self, p: Vec3) -> bool {
        match self.pattern {
            Pattern::Checker => {
                let s: i64 = p.iter().map(|&c| (c * self.freq).floor() as i64).sum();
                s.rem_euclid(2) == 0
            }
            Pattern::Stripes { axis } => {
                let phase = dot(p, axis) * self.freq;
                phase - phase.floor() < 0.5
            }
        }
    }

    pub fn shade(&self, base: Vec3, p: Vec3) -> Vec3 {
        if self.lit(p) {
            base
        } else {
            scale(base, 1.0 - self.contrast)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub color: Vec3,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: Vec3,
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = p.shape.bounds();
            if lo.iter().any(|&v| v < 0.0) || hi.iter().any(|&v| v > 1.0) {
                return Err(Error::Config(format!("primitive {i} leaves the unit cube")));
            }
            if !(p.texture.freq > 0.0) {
                return Err(Error::Config(format!(
                    "primitive {i} texture frequency must be > 0"
                )));
            }
            if !(0.0..=1.0).contains(&p.texture.contrast) {
                return Err(Error::Config(format!(
                    "primitive {i} contrast must lie in [0, 1]"
                )));
            }
            if let Pattern::Stripes { axis } = p.texture.pattern {
                if norm(axis) < 1e-9 {
                    return Err(Error::Config(format!("primitive {i} stripe axis is zero")));
                }
            }
        }
        let in01 = |c: &Vec3| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in01(&self.background) || !self.primitives.iter().all(|p| in01(&p.color)) {
            return Err(Error::Config("colors must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn empty(background: Vec3) -> Self {
        Self {
            primitives: Vec::new(),
            background,
        }
    }

    /// A stripe-textured sphere beside a checkered box, both textured above
    /// the Nyquist rate of a 24-cell grid.
    pub fn default_scene() -> Self {
        Self::with_frequencies(14.0, 28.0)
    }

    pub fn with_frequencies(stripe_freq: f64, checker_freq: f64) -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.34, 0.5, 0.42],
                        radius: 0.2,
                    },
                    color: [0.95, 0.55, 0.15],
                    texture: Texture {
                        pattern: Pattern::Stripes {
                            axis: normalize([0.3, 1.0, 0.2]),
                        },
                        freq: stripe_freq,
                        contrast: 0.7,
                    },
                },
                Primitive {
                    shape: Shape::Box {
                        min: [0.5, 0.3, 0.4],
                        max: [0.78, 0.68, 0.72],
                    },
                    color: [0.2, 0.6, 0.95],
                    texture: Texture {
                        pattern: Pattern::Checker,
                        freq: checker_freq,
                        contrast: 0.75,
                    },
                },
            ],
            background: [0.92, 0.92, 0.88],
        }
    }

    /// Density and color at `p`; the first containing primitive wins.
    pub fn radiance(&self, p: Vec3) -> (f64, Vec3) {
        for prim in &self.primitives {
            if prim.shape.contains(p) {
                return (OPAQUE_DENSITY, prim.texture.shade(prim.color, p));
            }
        }
        (0.0, self.background)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!(
                "fov {} outside (0, pi)",
                self.fov_y
            )));
        }
        let f = sub(self.target, self.position);
        if norm(f) < 1e-12 || norm(cross(normalize(f), normalize(self.up))) < 1e-9 {
            return Err(Error::InvalidArgument(
                "camera look direction is parallel to up".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(
                "camera image size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }

    /// Orthonormal (forward, right, up) basis.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = normalize(sub(self.target, self.position));
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        (f, r, u)
    }

    /// Unit direction through image-plane point `(x, y)` in pixel units,
    /// where pixel `(i, j)` spans `[i, i+1) x [j, j+1)`.
    pub fn direction(&self, x: f64, y: f64) -> Vec3 {
        let (f, r, u) = self.basis();
        let dx = x - 0.5 * self.width as f64;
        let dy = y - 0.5 * self.height as f64;
        normalize(add(
            add(scale(f, self.focal()), scale(r, dx)),
            scale(u, -dy),
        ))
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: usize, py: usize) -> Result<Ray> {
        if px >= self.width || py >= self.height {
            return Err(Error::InvalidArgument(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Ray::unit_cube(
            self.position,
            self.direction(px as f64 + 0.5, py as f64 + 0.5),
        ))
    }
}

/// Pinhole rays through the centers of the listed `(x, y)` pixels.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(x, y)| camera.pixel_ray(x, y))
        .collect()
}

fn pixel_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Integrates one ray through the scene with midpoint quadrature.
pub fn trace_reference(scene: &AnalyticScene, ray: &Ray, samples: usize) -> Vec3 {
    let Some((near, far)) = ray.bounds() else {
        return scene.background;
    };
    let delta = (far - near) / samples as f64;
    let mut sigmas = Vec::with_capacity(samples);
    let mut colors = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = near + (i as f64 + 0.5) * delta;
        let (s, c) = scene.radiance(ray.at(t));
        sigmas.push(s);
        colors.push(c);
    }
    composite_ray(&sigmas, &vec![delta; samples], &colors, scene.background).0
}

/// Averages `spp` Latin-hypercube sub-pixel rays per pixel. Each pixel's
/// offsets come from an RNG keyed by `(seed, pixel index)`.
pub fn render_reference(
    camera: &Camera,
    scene: &AnalyticScene,
    spp: usize,
    samples_per_ray: usize,
    seed: u64,
) -> Result<Image> {
    camera.validate()?;
    if spp == 0 || samples_per_ray == 0 {
        return Err(Error::InvalidArgument(
            "spp and samples per ray must be >= 1".into(),
        ));
    }
    let (w, h) = (camera.width, camera.height);
    let mut img = Image::filled(w, h, [0.0; 3]);
    let mut perm_x: Vec<usize> = (0..spp).collect();
    let mut perm_y: Vec<usize> = (0..spp).collect();
    for py in 0..h {
        for px in 0..w {
            let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(seed, (py * w + px) as u64));
            perm_x.shuffle(&mut rng);
            perm_y.shuffle(&mut rng);
            let mut acc = [0.0; 3];
            for s in 0..spp {
                let ox = (perm_x[s] as f64 + rng.random::<f64>()) / spp as f64;
                let oy = (perm_y[s] as f64 + rng.random::<f64>()) / spp as f64;
                let dir = camera.direction(px as f64 + ox, py as f64 + oy);
                let c = trace_reference(
                    scene,
                    &Ray::unit_cube(camera.position, dir),
                    samples_per_ray,
                );
                acc = add(acc, c);
            }
            let c = scale(acc, 1.0 / spp as f64);
            img.set_pixel(py, px, c.map(|v| v.clamp(0.0, 1.0) as f32));
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub splits: Vec<Split>,
}

impl ViewSet {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.images.len() || self.cameras.len() != self.splits.len() {
            return Err(Error::InvalidArgument(
                "viewset lists differ in length".into(),
            ));
        }
        if self.indices(Split::Train).is_empty() || self.indices(Split::Test).is_empty() {
            return Err(Error::InvalidArgument(
                "viewset needs train and test views".into(),
            ));
        }
        let first = &self.images[0];
        if self.images.iter().any(|i| !i.same_size(first)) {
            return Err(Error::InvalidArgument(
                "viewset images differ in size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub resolution: usize,
    pub spp: usize,
    pub samples_per_ray: usize,
    pub ring_radius: f64,
    pub fov_y: f64,
}

impl Default for ViewSetConfig {
    fn default() -> Self {
        Self {
            n_train: 12,
            n_test: 4,
            resolution: 128,
            spp: 8,
            samples_per_ray: 256,
            ring_radius: 1.5,
            fov_y: 40f64.to_radians(),
        }
    }
}

pub const SCENE_CENTER: Vec3 = [0.5, 0.5, 0.5];

/// Cameras on a ring around the scene center. Test views are spread evenly
/// through the azimuth order so they interleave the training views.
pub fn ring_cameras(cfg: &ViewSetConfig, seed: u64) -> Result<(Vec<Camera>, Vec<Split>)> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::InvalidArgument(
            "need at least one train and one test view".into(),
        ));
    }
    let n = cfg.n_train + cfg.n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(seed, u64::MAX));
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let test_slots: Vec<usize> = (0..cfg.n_test)
        .map(|k| (k * n + n / 2) / cfg.n_test)
        .collect();
    let mut cams = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let az = phase + std::f64::consts::TAU * i as f64 / n as f64;
        let el = rng.random_range(20f64..40.0).to_radians();
        let pos = [
            SCENE_CENTER[0] + cfg.ring_radius * el.cos() * az.cos(),
            SCENE_CENTER[1] + cfg.ring_radius * el.sin(),
            SCENE_CENTER[2] + cfg.ring_radius * el.cos() * az.sin(),
        ];
        let jitter: Vec3 = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
        cams.push(Camera {
            position: pos,
            target: add(SCENE_CENTER, jitter),
            up: [0.0, 1.0, 0.0],
            fov_y: cfg.fov_y,
            width: cfg.resolution,
            height: cfg.resolution,
        });
        splits.push(if test_slots.contains(&i) {
            Split::Test
        } else {
            Split::Train
        });
    }
    Ok((cams, splits))
}

/// Cameras plus their supersampled reference images.
pub fn generate_viewset(scene: &AnalyticScene, cfg: &ViewSetConfig, seed: u64) -> Result<ViewSet> {
    scene.validate()?;
    let (cameras, splits) = ring_cameras(cfg, seed)?;
    let images = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            render_reference(
                c,
                scene,
                cfg.spp,
                cfg.samples_per_ray,
                pixel_seed(seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet {
        cameras,
        images,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_space_is_background() {
        let s = AnalyticScene::default_scene();
        assert_eq!(s.radiance([0.02, 0.02, 0.02]), (0.0, s.background));
    }

    #[test]
    fn checker_boundary_uses_floor() {
        let t = Texture {
            pattern: Pattern::Checker,
            freq: 4.0,
            contrast: 0.5,
        };
        // x = 0.25 sits on the edge between cells 0 and 1; floor picks cell 1.
        assert!(!t.lit([0.25, 0.1, 0.1]));
        assert!(t.lit([0.2499, 0.1, 0.1]));
    }

    #[test]
    fn camera_validation() {
        let mut c = Camera {
            position: [0.0, 0.0, 0.0],
            target: [0.0, 1.0, 0.0],
            up: [0.0, 1.0, 0.0],
            fov_y: 1.0,
            width: 4,
            height: 4,
        };
        assert!(c.validate().is_err());
        c.target = [0.0, 0.0, -1.0];
        assert!(c.validate().is_ok());
        c.fov_y = std::f64::consts::PI;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scene_validation_rejects_escaping_primitive() {
        let mut s = AnalyticScene::default_scene();
        assert!(s.validate().is_ok());
        s.primitives[0].shape = Shape::Sphere {
            center: [0.1, 0.5, 0.5],
            radius: 0.2,
        };
        assert!(s.validate().is_err());
    }
}
