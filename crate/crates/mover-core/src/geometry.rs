//! Pinhole cameras, ray generation, point sampling along rays, close-ray
//! filtering, and nearest-point pairing for the spatial consistency loss.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("no ray pairs available for spatial consistency")]
    EmptyPairSet,
}

/// Pinhole camera: intrinsics, world-from-camera rotation, camera center.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// world-from-camera rotation (columns are camera axes in world frame)
    pub rotation: Matrix3<f64>,
    /// camera center in world coordinates
    pub center: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(cx >= 0.0 && cx < width as f64, "cx out of image");
        assert!(cy >= 0.0 && cy < height as f64, "cy out of image");
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        assert!(ortho < 1e-10, "rotation not orthonormal (residual {ortho})");
        assert!(
            (rotation.determinant() - 1.0).abs() < 1e-10,
            "rotation must be proper (det +1)"
        );
        Camera { fx, fy, cx, cy, rotation, center, width, height }
    }

    /// Camera looking at `target` from `eye`, y-down image convention.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right).normalize();
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Camera::new(
            fx,
            fx,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            eye,
            width,
            height,
        )
    }

    /// Perspective projection of a world point; returns (u, v, depth).
    pub fn project(&self, x: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
        let pc = self.rotation.transpose() * (x - self.center);
        if pc.z <= 0.0 {
            return Err(GeometryError::BehindCamera(pc.z));
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        Ok((u, v, pc.z))
    }

    /// Inverse of `project`: world point at pixel (u, v), camera depth d.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        self.rotation * pc + self.center
    }

    /// Ray through pixel center (u, v); unit direction in world frame.
    pub fn pixel_ray(&self, u: f64, v: f64, view_id: usize, t_near: f64, t_far: f64) -> Ray {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let dir = (self.rotation * dir_cam).normalize();
        Ray { origin: self.center, direction: dir, pixel: (u, v), view_id, t_near, t_far }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub pixel: (f64, f64),
    pub view_id: usize,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Rays gathered for one training step; may span several target views.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
}

/// Depths and positions of M samples along one ray, ascending in t.
#[derive(Debug, Clone)]
pub struct SampledPoints {
    pub depths: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
}

/// Stratified sampling of M points in [t_near, t_far]. Deterministic mode
/// places each sample at its stratum midpoint.
pub fn sample_along_ray(
    ray: &Ray,
    samples: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> SampledPoints {
    assert!(samples >= 1, "need at least one sample");
    let span = ray.t_far - ray.t_near;
    let mut depths = Vec::with_capacity(samples);
    for k in 0..samples {
        let offset = if jitter { rng.gen::<f64>() } else { 0.5 };
        depths.push(ray.t_near + (k as f64 + offset) / samples as f64 * span);
    }
    let positions = depths.iter().map(|&t| ray.at(t)).collect();
    SampledPoints { depths, positions }
}

/// Ray pairs from the same target view whose pixel distance is below
/// `epsilon`. Cross-view pairs are excluded: pixel distances are only
/// comparable within one image.
pub fn filter_close_rays(batch: &RayBatch, epsilon: f64) -> Vec<(usize, usize)> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut pairs = Vec::new();
    for a in 0..batch.rays.len() {
        for b in (a + 1)..batch.rays.len() {
            let (ra, rb) = (&batch.rays[a], &batch.rays[b]);
            if ra.view_id != rb.view_id {
                continue;
            }
            let du = ra.pixel.0 - rb.pixel.0;
            let dv = ra.pixel.1 - rb.pixel.1;
            if (du * du + dv * dv).sqrt() < epsilon {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// One matched point pair: sample `index_a` on ray a paired with its nearest
/// sample `index_b` on ray b, at Euclidean distance `distance`.
#[derive(Debug, Clone)]
pub struct PointPair {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Nearest-point pairs for one close-ray pair, with softmax(-d) confidence
/// weights over the pairs.
#[derive(Debug, Clone)]
pub struct PointPairSet {
    pub pairs: Vec<PointPair>,
    pub confidence: Vec<f64>,
}

/// For every sample on ray a, finds its nearest sample on ray b (brute force,
/// exact at desk scale) and weights each pair by softmax of the negated
/// distance.
pub fn pair_nearest_points(
    points_a: &SampledPoints,
    points_b: &SampledPoints,
) -> Result<PointPairSet, GeometryError> {
    if points_a.positions.is_empty() || points_b.positions.is_empty() {
        return Err(GeometryError::EmptyPairSet);
    }
    let mut pairs = Vec::with_capacity(points_a.positions.len());
    for (i, pa) in points_a.positions.iter().enumerate() {
        let (j, d) = points_b
            .positions
            .iter()
            .enumerate()
            .map(|(j, pb)| (j, (pa - pb).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        pairs.push(PointPair { index_a: i, index_b: j, distance: d });
    }
    // softmax of -d, shifted by the min distance for stability
    let dmin = pairs.iter().map(|p| p.distance).fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = pairs.iter().map(|p| (-(p.distance - dmin)).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let confidence = weights.into_iter().map(|w| w / sum).collect();
    Ok(PointPairSet { pairs, confidence })
}
