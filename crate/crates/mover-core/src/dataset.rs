//! On-disk scene datasets: posed views with split tags plus the generator
//! parameters needed to re-render ground truth with the oracle.
//!
//! Layout per scene: `scene_<id>/cameras.txt`, `scene_<id>/view_<k>.ppm`,
//! `scene_<id>/meta.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::Camera;
use crate::image::{Image, ImageError};
use crate::scene::{generate_scene, oracle_render, ring_cameras, SyntheticScene, GENERATOR_VERSION};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}, line {line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("generator version mismatch: file has {found}, this build writes {expected}")]
    VersionMismatch { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
    FewShot,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
            Split::FewShot => "fewshot",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "source" => Some(Split::Source),
            "target" => Some(Split::Target),
            "fewshot" => Some(Split::FewShot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub scene_id: u64,
    pub views: Vec<View>,
    /// generator seed, kept so the oracle can re-render any view
    pub seed: u64,
    pub generator_version: u32,
}

impl SceneDataset {
    pub fn scene(&self) -> SyntheticScene {
        generate_scene(self.seed)
    }

    pub fn views_in(&self, split: Split) -> impl Iterator<Item = (usize, &View)> {
        self.views.iter().enumerate().filter(move |(_, v)| v.split == split)
    }

    pub fn source_views(&self) -> Vec<&View> {
        self.views.iter().filter(|v| v.split == Split::Source).collect()
    }
}

/// Renders a fresh dataset: `num_views` ring cameras around the seeded
/// scene, the last `num_targets` views tagged as held-out targets.
pub fn generate_dataset(
    seed: u64,
    num_views: usize,
    num_targets: usize,
    width: usize,
    height: usize,
) -> SceneDataset {
    assert!(num_targets < num_views, "need at least one source view");
    let scene = generate_scene(seed);
    let mut cam_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let cameras = ring_cameras(num_views, width, height, &mut cam_rng);
    let views = cameras
        .into_iter()
        .enumerate()
        .map(|(i, camera)| {
            // images pass through the on-disk quantization so training data
            // is identical whether freshly generated or reloaded
            let image = oracle_render(&scene, &camera).quantized();
            let split = if i < num_views - num_targets { Split::Source } else { Split::Target };
            View { camera, image, split }
        })
        .collect();
    SceneDataset { scene_id: seed, views, seed, generator_version: GENERATOR_VERSION }
}

pub fn scene_dir(root: &Path, scene_id: u64) -> PathBuf {
    root.join(format!("scene_{scene_id}"))
}

pub fn save_dataset(root: &Path, ds: &SceneDataset) -> Result<(), DatasetError> {
    let dir = scene_dir(root, ds.scene_id);
    fs::create_dir_all(&dir).map_err(|source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut cameras = String::new();
    for (k, v) in ds.views.iter().enumerate() {
        let c = &v.camera;
        let r = &c.rotation;
        cameras.push_str(&format!(
            "{k} {} {} {} {} {} {}",
            c.fx, c.fy, c.cx, c.cy, c.width, c.height
        ));
        for row in 0..3 {
            for col in 0..3 {
                cameras.push_str(&format!(" {}", r[(row, col)]));
            }
        }
        cameras.push_str(&format!(" {} {} {}\n", c.center.x, c.center.y, c.center.z));
        v.image.save_ppm(&dir.join(format!("view_{k}.ppm")))?;
    }
    let cam_path = dir.join("cameras.txt");
    fs::write(&cam_path, cameras).map_err(|source| DatasetError::Io {
        path: cam_path.display().to_string(),
        source,
    })?;
    let meta = format!(
        "seed = {}\ngenerator_version = {}\nsplits = {}\n",
        ds.seed,
        ds.generator_version,
        ds.views.iter().map(|v| v.split.tag()).collect::<Vec<_>>().join(","),
    );
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, meta).map_err(|source| DatasetError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    Ok(())
}

pub fn load_dataset(root: &Path, scene_id: u64) -> Result<SceneDataset, DatasetError> {
    let dir = scene_dir(root, scene_id);
    let meta_path = dir.join("meta.txt");
    let meta = fs::read_to_string(&meta_path).map_err(|source| DatasetError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    let mut seed = None;
    let mut version = None;
    let mut splits: Vec<Split> = Vec::new();
    for (ln, line) in meta.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| DatasetError::Format {
            path: meta_path.display().to_string(),
            line: ln + 1,
            message: "expected key = value".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "seed" => {
                seed = Some(value.parse().map_err(|_| DatasetError::Format {
                    path: meta_path.display().to_string(),
                    line: ln + 1,
                    message: "bad seed".into(),
                })?)
            }
            "generator_version" => {
                version = Some(value.parse().map_err(|_| DatasetError::Format {
                    path: meta_path.display().to_string(),
                    line: ln + 1,
                    message: "bad generator_version".into(),
                })?)
            }
            "splits" => {
                for tag in value.split(',') {
                    splits.push(Split::parse(tag.trim()).ok_or_else(|| DatasetError::Format {
                        path: meta_path.display().to_string(),
                        line: ln + 1,
                        message: format!("unknown split tag `{tag}`"),
                    })?);
                }
            }
            other => {
                return Err(DatasetError::Format {
                    path: meta_path.display().to_string(),
                    line: ln + 1,
                    message: format!("unknown key `{other}`"),
                })
            }
        }
    }
    let seed = seed.ok_or_else(|| DatasetError::Format {
        path: meta_path.display().to_string(),
        line: 0,
        message: "missing seed".into(),
    })?;
    let generator_version = version.unwrap_or(0);
    if generator_version != GENERATOR_VERSION {
        return Err(DatasetError::VersionMismatch {
            found: generator_version,
            expected: GENERATOR_VERSION,
        });
    }

    let cam_path = dir.join("cameras.txt");
    let cam_text = fs::read_to_string(&cam_path).map_err(|source| DatasetError::Io {
        path: cam_path.display().to_string(),
        source,
    })?;
    let mut views = Vec::new();
    for (ln, line) in cam_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| DatasetError::Format {
                path: cam_path.display().to_string(),
                line: ln + 1,
                message: "non-numeric field".into(),
            })?;
        if fields.len() != 19 {
            return Err(DatasetError::Format {
                path: cam_path.display().to_string(),
                line: ln + 1,
                message: format!("expected 19 fields, got {}", fields.len()),
            });
        }
        let k = fields[0] as usize;
        let rotation = Matrix3::from_row_slice(&fields[7..16]);
        let camera = Camera::new(
            fields[1],
            fields[2],
            fields[3],
            fields[4],
            rotation,
            Vector3::new(fields[16], fields[17], fields[18]),
            fields[5] as usize,
            fields[6] as usize,
        );
        let image = Image::load_ppm(&dir.join(format!("view_{k}.ppm")))?;
        let split = splits.get(k).copied().unwrap_or(Split::Source);
        views.push(View { camera, image, split });
    }
    if views.len() != splits.len() {
        return Err(DatasetError::Format {
            path: cam_path.display().to_string(),
            line: 0,
            message: format!("{} camera rows but {} split tags", views.len(), splits.len()),
        });
    }
    Ok(SceneDataset { scene_id, views, seed, generator_version })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(7, 5, 2, 16, 16);
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path(), 7).unwrap();
        // re-save and compare every byte
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &loaded).unwrap();
        for name in ["cameras.txt", "meta.txt", "view_0.ppm", "view_4.ppm"] {
            let a = fs::read(scene_dir(dir.path(), 7).join(name)).unwrap();
            let b = fs::read(scene_dir(dir2.path(), 7).join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
        assert_eq!(loaded.views.len(), 5);
        assert_eq!(loaded.views[0].split, Split::Source);
        assert_eq!(loaded.views[4].split, Split::Target);
        // pixel data survives the quantized round trip exactly
        assert_eq!(loaded.views[0].image, ds.views[0].image);
    }

    #[test]
    fn truncated_image_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(3, 3, 1, 8, 8);
        save_dataset(dir.path(), &ds).unwrap();
        let bad = scene_dir(dir.path(), 3).join("view_1.ppm");
        let bytes = fs::read(&bad).unwrap();
        fs::write(&bad, &bytes[..10]).unwrap();
        let err = load_dataset(dir.path(), 3).unwrap_err();
        assert!(err.to_string().contains("view_1.ppm"), "{err}");
    }

    #[test]
    fn camera_rows_match_image_count() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(4, 4, 1, 8, 8);
        save_dataset(dir.path(), &ds).unwrap();
        let cam_path = scene_dir(dir.path(), 4).join("cameras.txt");
        let rows = fs::read_to_string(&cam_path).unwrap().lines().count();
        assert_eq!(rows, ds.views.len());
        // dropping a row breaks the row/tag invariant
        let text = fs::read_to_string(&cam_path).unwrap();
        let shorter: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        fs::write(&cam_path, shorter).unwrap();
        assert!(load_dataset(dir.path(), 4).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(9, 3, 1, 8, 8);
        save_dataset(dir.path(), &ds).unwrap();
        let meta = scene_dir(dir.path(), 9).join("meta.txt");
        let text = fs::read_to_string(&meta).unwrap().replace(
            &format!("generator_version = {GENERATOR_VERSION}"),
            "generator_version = 999",
        );
        fs::write(&meta, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), 9),
            Err(DatasetError::VersionMismatch { found: 999, .. })
        ));
    }

    #[test]
    fn dataset_images_match_oracle_rerender() {
        let ds = generate_dataset(11, 3, 1, 12, 12);
        let scene = ds.scene();
        for v in &ds.views {
            let re = oracle_render(&scene, &v.camera).quantized();
            assert_eq!(re, v.image);
        }
    }
}
