use nerfrestore::image::Image;
use nerfrestore::scene::*;
use proptest::prelude::*;

fn checker_box_scene(freq: f64) -> AnalyticScene {
    AnalyticScene {
        primitives: vec![Primitive {
            shape: Shape::Box {
                min: [0.05, 0.05, 0.05],
                max: [0.95, 0.95, 0.95],
            },
            color: [0.9, 0.9, 0.9],
            texture: Texture {
                pattern: Pattern::Checker,
                freq,
                contrast: 1.0,
            },
        }],
        background: [0.0, 0.0, 0.0],
    }
}

fn front_camera(size: usize) -> Camera {
    Camera {
        position: [0.5, 0.5, 2.0],
        target: [0.5, 0.5, 0.5],
        up: [0.0, 1.0, 0.0],
        fov_y: 20f64.to_radians(),
        width: size,
        height: size,
    }
}

fn total_variation(img: &Image) -> f64 {
    let (w, h) = (img.width(), img.height());
    let mut tv = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = img.get(c, y, x) as f64;
                if x + 1 < w {
                    tv += (img.get(c, y, x + 1) as f64 - v).abs();
                }
                if y + 1 < h {
                    tv += (img.get(c, y + 1, x) as f64 - v).abs();
                }
            }
        }
    }
    tv
}

#[test]
fn supersampling_reduces_checker_aliasing() {
    let scene = checker_box_scene(90.0);
    let cam = front_camera(32);
    let one = render_reference(&cam, &scene, 1, 64, 3).unwrap();
    let many = render_reference(&cam, &scene, 16, 64, 3).unwrap();
    assert!(total_variation(&many) < total_variation(&one));
}

#[test]
fn solid_red_box_renders_red() {
    let scene = AnalyticScene {
        primitives: vec![Primitive {
            shape: Shape::Box {
                min: [0.0, 0.0, 0.0],
                max: [1.0, 1.0, 1.0],
            },
            color: [1.0, 0.0, 0.0],
            texture: Texture {
                pattern: Pattern::Checker,
                freq: 1.0,
                contrast: 0.0,
            },
        }],
        background: [0.0, 0.0, 1.0],
    };
    let img = render_reference(&front_camera(8), &scene, 2, 128, 0).unwrap();
    for y in 2..6 {
        for x in 2..6 {
            assert!((img.get(0, y, x) - 1.0).abs() < 1e-3);
            assert!(img.get(1, y, x).abs() < 1e-3);
            assert!(img.get(2, y, x).abs() < 1e-3);
        }
    }
}

#[test]
fn ring_cameras_face_the_scene() {
    let cfg = ViewSetConfig {
        n_train: 8,
        n_test: 2,
        ..Default::default()
    };
    let (cams, splits) = ring_cameras(&cfg, 11).unwrap();
    assert_eq!(cams.len(), 10);
    assert_eq!(splits.iter().filter(|&&s| s == Split::Test).count(), 2);
    for c in &cams {
        let (f, _, _) = c.basis();
        let to_center = normalize(sub(SCENE_CENTER, c.position));
        let angle = dot(f, to_center).clamp(-1.0, 1.0).acos();
        assert!(angle < 30f64.to_radians());
    }
}

#[test]
fn viewset_has_requested_splits() {
    let cfg = ViewSetConfig {
        n_train: 8,
        n_test: 2,
        resolution: 8,
        spp: 1,
        samples_per_ray: 16,
        ..Default::default()
    };
    let vs = generate_viewset(&AnalyticScene::default_scene(), &cfg, 0).unwrap();
    vs.validate().unwrap();
    assert_eq!(vs.cameras.len(), 10);
    assert_eq!(vs.indices(Split::Train).len(), 8);
    assert_eq!(vs.indices(Split::Test).len(), 2);
    let again = generate_viewset(&AnalyticScene::default_scene(), &cfg, 0).unwrap();
    assert_eq!(vs, again);
}

#[test]
fn pixel_variance_does_not_grow_with_spp() {
    let scene = checker_box_scene(40.0);
    let cam = front_camera(12);
    let seeds: Vec<u64> = (0..8).collect();
    let variance = |spp: usize| -> f64 {
        let imgs: Vec<Image> = seeds
            .iter()
            .map(|&s| render_reference(&cam, &scene, spp, 32, s).unwrap())
            .collect();
        let n = imgs[0].data().len();
        assert!(n / 3 >= 100);
        let mut total = 0.0;
        for i in 0..n {
            let vals: Vec<f64> = imgs.iter().map(|im| im.data()[i] as f64).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            total += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        }
        total / n as f64
    };
    let (v1, v4, v16) = (variance(1), variance(4), variance(16));
    assert!(v4 <= v1 && v16 <= v4, "{v1} {v4} {v16}");
}

#[test]
fn canonical_camera_center_ray_looks_down_negative_z() {
    let cam = Camera {
        position: [0.0, 0.0, 0.0],
        target: [0.0, 0.0, -1.0],
        up: [0.0, 1.0, 0.0],
        fov_y: 60f64.to_radians(),
        width: 5,
        height: 5,
    };
    let r = cam.pixel_ray(2, 2).unwrap();
    let d = r.direction;
    assert!(d[0].abs() < 1e-12 && d[1].abs() < 1e-12 && (d[2] + 1.0).abs() < 1e-12);
}

#[test]
fn corner_angle_matches_pinhole_geometry() {
    let cam = Camera {
        position: [0.0, 0.0, 0.0],
        target: [0.0, 0.0, -1.0],
        up: [0.0, 1.0, 0.0],
        fov_y: 50f64.to_radians(),
        width: 40,
        height: 30,
    };
    let d = cam.direction(0.0, 0.0);
    let half = (20f64.powi(2) + 15f64.powi(2)).sqrt();
    let expect = (half / cam.focal()).atan();
    let got = dot(d, [0.0, 0.0, -1.0]).acos();
    assert!((got - expect).abs() < 1e-9);
    // vertical half-extent recovers half the field of view
    let top = cam.direction(20.0, 0.0);
    assert!((dot(top, [0.0, 0.0, -1.0]).acos() - 25f64.to_radians()).abs() < 1e-9);
}

#[test]
fn out_of_bounds_pixel_is_an_error() {
    let cam = front_camera(4);
    assert!(cam.pixel_ray(4, 0).is_err());
    assert!(generate_rays(&cam, &[(0, 0), (1, 7)]).is_err());
}

#[test]
fn invalid_scenes_are_rejected() {
    let mut s = AnalyticScene::default_scene();
    s.primitives[0].texture.contrast = 1.5;
    assert!(s.validate().is_err());
    let mut s = AnalyticScene::default_scene();
    s.background = [2.0, 0.0, 0.0];
    assert!(s.validate().is_err());
    let mut cam = front_camera(4);
    cam.up = [0.0, 0.0, 1.0];
    assert!(render_reference(&cam, &s, 1, 4, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ray_directions_are_unit(
        px in 0usize..32, py in 0usize..24,
        az in 0.0f64..6.28, el in -1.2f64..1.2, fov in 0.2f64..2.5,
    ) {
        let cam = Camera {
            position: [0.5 + 2.0 * el.cos() * az.cos(), 0.5 + 2.0 * el.sin(), 0.5 + 2.0 * el.cos() * az.sin()],
            target: [0.5, 0.5, 0.5],
            up: [0.0, 1.0, 0.0],
            fov_y: fov,
            width: 32,
            height: 24,
        };
        let r = cam.pixel_ray(px, py).unwrap();
        prop_assert!((norm(r.direction) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reference_pixels_stay_in_unit_range(seed in 0u64..1000) {
        let img = render_reference(&front_camera(4), &AnalyticScene::default_scene(), 2, 16, seed).unwrap();
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
