//! Procedural synthetic scenes and the analytic ray-tracer oracle that
//! supplies ground-truth images for training and evaluation.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Camera;
use crate::image::Image;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub albedo: [f64; 3],
    pub specular_strength: f64,
    pub specular_exponent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64, material: Material },
    Box { min: Vector3<f64>, max: Vector3<f64>, material: Material },
    GroundPlane { y: f64, material: Material },
}

impl Primitive {
    pub fn material(&self) -> &Material {
        match self {
            Primitive::Sphere { material, .. }
            | Primitive::Box { material, .. }
            | Primitive::GroundPlane { material, .. } => material,
        }
    }

    pub fn is_specular(&self) -> bool {
        self.material().specular_strength > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    /// unit vector pointing from surfaces toward the light
    pub light_dir: Vector3<f64>,
    pub light_color: [f64; 3],
    pub background: [f64; 3],
    pub seed: u64,
}

/// Deterministic scene from a seed: 1-4 primitives with Lambertian albedo
/// and (about half the time) a Phong specular lobe, one directional light,
/// everything inside a unit-scale working volume.
pub fn generate_scene(seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = 1 + (rng.gen::<u64>() % 4) as usize;
    let mut primitives = Vec::with_capacity(count);
    let mut has_plane = false;
    for i in 0..count {
        let material = random_material(&mut rng);
        let kind = if i == 0 { rng.gen::<f64>() * 0.8 } else { rng.gen::<f64>() };
        let prim = if kind < 0.5 {
            Primitive::Sphere {
                center: Vector3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() * 0.6 - 0.3,
                    rng.gen::<f64>() - 0.5,
                ),
                radius: 0.1 + rng.gen::<f64>() * 0.2,
                material,
            }
        } else if kind < 0.8 || has_plane {
            let c = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() * 0.6 - 0.3,
                rng.gen::<f64>() - 0.5,
            );
            let half = Vector3::new(
                0.05 + rng.gen::<f64>() * 0.15,
                0.05 + rng.gen::<f64>() * 0.15,
                0.05 + rng.gen::<f64>() * 0.15,
            );
            Primitive::Box { min: c - half, max: c + half, material }
        } else {
            has_plane = true;
            Primitive::GroundPlane { y: -0.45 - rng.gen::<f64>() * 0.1, material }
        };
        primitives.push(prim);
    }
    let light_dir = Vector3::new(
        rng.gen::<f64>() - 0.5,
        0.5 + rng.gen::<f64>() * 0.5,
        rng.gen::<f64>() - 0.5,
    )
    .normalize();
    let light_color = [0.9 + rng.gen::<f64>() * 0.1; 3];
    let background = [
        0.02 + rng.gen::<f64>() * 0.1,
        0.02 + rng.gen::<f64>() * 0.1,
        0.05 + rng.gen::<f64>() * 0.15,
    ];
    SyntheticScene { primitives, light_dir, light_color, background, seed }
}

fn random_material(rng: &mut ChaCha8Rng) -> Material {
    let albedo = [
        0.15 + rng.gen::<f64>() * 0.8,
        0.15 + rng.gen::<f64>() * 0.8,
        0.15 + rng.gen::<f64>() * 0.8,
    ];
    // shading properties split: roughly half the primitives get a specular
    // lobe, the rest are purely diffuse
    let specular = rng.gen::<f64>() < 0.5;
    Material {
        albedo,
        specular_strength: if specular { 0.2 + rng.gen::<f64>() * 0.6 } else { 0.0 },
        specular_exponent: if specular { 8.0 + rng.gen::<f64>() * 56.0 } else { 1.0 },
    }
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    material: Material,
}

fn intersect(prim: &Primitive, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    match prim {
        Primitive::Sphere { center, radius, material } => {
            let oc = origin - center;
            let b = oc.dot(dir);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > 1e-9 { -b - sq } else { -b + sq };
            if t <= 1e-9 {
                return None;
            }
            let p = origin + t * dir;
            Some(Hit { t, normal: (p - center).normalize(), material: material.clone() })
        }
        Primitive::Box { min, max, material } => {
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut axis_enter = 0;
            for a in 0..3 {
                let d = dir[a];
                if d.abs() < 1e-15 {
                    if origin[a] < min[a] || origin[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (min[a] - origin[a]) / d;
                let mut t1 = (max[a] - origin[a]) / d;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    axis_enter = a;
                }
                t_exit = t_exit.min(t1);
                if t_enter > t_exit {
                    return None;
                }
            }
            let t = if t_enter > 1e-9 { t_enter } else { t_exit };
            if t <= 1e-9 || t_enter > t_exit {
                return None;
            }
            let mut normal = Vector3::zeros();
            normal[axis_enter] = -dir[axis_enter].signum();
            Some(Hit { t, normal, material: material.clone() })
        }
        Primitive::GroundPlane { y, material } => {
            if dir.y.abs() < 1e-15 {
                return None;
            }
            let t = (y - origin.y) / dir.y;
            if t <= 1e-9 {
                return None;
            }
            Some(Hit {
                t,
                normal: Vector3::new(0.0, if dir.y < 0.0 { 1.0 } else { -1.0 }, 0.0),
                material: material.clone(),
            })
        }
    }
}

/// Nearest-hit shade of a single ray: Lambert + Phong, no shadows.
pub fn trace_ray(scene: &SyntheticScene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
    let mut best: Option<Hit> = None;
    for prim in &scene.primitives {
        if let Some(hit) = intersect(prim, origin, dir) {
            if best.as_ref().map_or(true, |b| hit.t < b.t) {
                best = Some(hit);
            }
        }
    }
    let Some(hit) = best else {
        return scene.background;
    };
    let n = hit.normal;
    let l = scene.light_dir;
    let diffuse = n.dot(&l).max(0.0);
    let view = -dir;
    let reflect = 2.0 * n.dot(&l) * n - l;
    let spec = if hit.material.specular_strength > 0.0 {
        hit.material.specular_strength
            * reflect.dot(&view).max(0.0).powf(hit.material.specular_exponent)
    } else {
        0.0
    };
    let ambient = 0.15;
    [0, 1, 2].map(|i| {
        hit.material.albedo[i] * (ambient + 0.85 * diffuse) * scene.light_color[i]
            + spec * scene.light_color[i]
    })
}

/// Analytic ray-traced image through a pinhole camera; deterministic.
pub fn oracle_render(scene: &SyntheticScene, camera: &Camera) -> Image {
    let mut img = Image::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = camera.pixel_ray(x as f64 + 0.5, y as f64 + 0.5, 0, 0.1, 10.0);
            img.set(x, y, trace_ray(scene, &ray.origin, &ray.direction));
        }
    }
    img
}

/// Ring of cameras looking at the origin, used by the dataset generator.
pub fn ring_cameras(num: usize, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<Camera> {
    let mut cams = Vec::with_capacity(num);
    let fx = width as f64 * 1.2;
    for i in 0..num {
        let angle = i as f64 / num as f64 * std::f64::consts::TAU + rng.gen::<f64>() * 0.1;
        let elev = 0.2 + rng.gen::<f64>() * 0.4;
        let r = 2.0 + rng.gen::<f64>() * 0.3;
        let eye = Vector3::new(r * angle.cos(), r * elev, r * angle.sin());
        cams.push(Camera::look_at(
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            fx,
            width,
            height,
        ));
    }
    cams
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(17), generate_scene(17));
    }

    #[test]
    fn primitive_count_bounds() {
        for seed in 0..200 {
            let n = generate_scene(seed).primitives.len();
            assert!((1..=4).contains(&n), "seed {seed} produced {n} primitives");
        }
    }

    #[test]
    fn specular_fraction_over_seed_sweep() {
        let specular = (0..100)
            .filter(|&s| generate_scene(s).primitives.iter().any(Primitive::is_specular))
            .count();
        assert!(specular >= 30, "only {specular}/100 scenes specular");
    }

    #[test]
    fn empty_scene_renders_background() {
        let mut scene = generate_scene(0);
        scene.primitives.clear();
        let cam = Camera::new(
            32.0,
            32.0,
            16.0,
            16.0,
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, -2.0),
            32,
            32,
        );
        let img = oracle_render(&scene, &cam);
        assert!(img.pixels.iter().all(|p| *p == scene.background));
    }

    #[test]
    fn sphere_silhouette_radius() {
        let mut scene = generate_scene(0);
        scene.primitives = vec![Primitive::Sphere {
            center: Vector3::new(0.0, 0.0, 0.0),
            radius: 0.3,
            material: Material {
                albedo: [1.0, 0.0, 0.0],
                specular_strength: 0.0,
                specular_exponent: 1.0,
            },
        }];
        let z = 2.0;
        let fx = 120.0;
        let cam = Camera::new(
            fx,
            fx,
            48.0,
            48.0,
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, -z),
            96,
            96,
        );
        let img = oracle_render(&scene, &cam);
        // measure silhouette radius along the center row
        let cy = 48usize;
        let hits: Vec<usize> = (0..96).filter(|&x| img.at(x, cy) != scene.background).collect();
        let measured = (hits.len() as f64) / 2.0;
        // silhouette of a sphere at distance z: apparent radius is
        // fx * R / sqrt(z^2 - R^2), which stays within 1 px of fx * R / z here
        let expected = fx * 0.3 / z;
        assert!(
            (measured - expected).abs() <= 1.5,
            "measured {measured}, expected {expected}"
        );
    }

    #[test]
    fn plane_homography_between_views() {
        // points on the ground plane project consistently through the
        // plane-induced homography between two cameras
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plane_y = -0.5;
        let cams = ring_cameras(2, 64, 64, &mut rng);
        for _ in 0..200 {
            let p = Vector3::new(rng.gen::<f64>() - 0.5, plane_y, rng.gen::<f64>() - 0.5);
            let (Ok((u1, v1, _)), Ok((u2, v2, _))) = (cams[0].project(&p), cams[1].project(&p))
            else {
                continue;
            };
            // homography route: unproject pixel 1 onto the plane, reproject
            let ray = cams[0].pixel_ray(u1, v1, 0, 0.01, 100.0);
            let t = (plane_y - ray.origin.y) / ray.direction.y;
            let on_plane = ray.at(t);
            let (u2b, v2b, _) = cams[1].project(&on_plane).unwrap();
            assert!((u2 - u2b).abs() < 1e-9 && (v2 - v2b).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_deterministic() {
        let scene = generate_scene(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = ring_cameras(1, 24, 24, &mut rng).remove(0);
        let a = oracle_render(&scene, &cam);
        let b = oracle_render(&scene, &cam);
        for (pa, pb) in a.pixels.iter().zip(b.pixels.iter()) {
            for i in 0..3 {
                assert_eq!(pa[i].to_bits(), pb[i].to_bits());
            }
        }
    }
}
