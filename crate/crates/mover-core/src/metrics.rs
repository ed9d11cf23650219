//! Image quality metrics (PSNR, SSIM), evaluation over dataset splits, and
//! the analysis artifacts: expert-selection maps, usage histograms, and
//! cross-scene overlap tables. All tabular output is CSV (comma, `\n`,
//! header row, `.` decimal); values print with f64 round-trip precision so
//! the readers in this module re-parse them losslessly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{SceneDataset, Split};
use crate::image::{Image, ImageError};
use crate::moe::combination_count;
use crate::renderer::{MoveModel, RenderSettings};
use crate::tensor::ParamStore;

/// PSNR reported for a zero-MSE pair; keeps reports finite and sortable.
pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("image {width}x{height} is smaller than the {SSIM_WINDOW}px SSIM window")]
    ImageTooSmall { width: usize, height: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path} at line {line}: {message}")]
    Csv { path: String, line: usize, message: String },
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::ShapeMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels, dynamic range 1.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let n = (a.pixels.len() * 3) as f64;
    let mse: f64 = a
        .pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(pa, pb)| {
            pa.iter().zip(pb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            k.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn grayscale(img: &Image) -> Vec<f64> {
    img.pixels.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Structural similarity on channel-mean grayscale: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1, mean over windows
/// with full support.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall { width: w, height: h });
    }
    let ga = grayscale(a);
    let gb = grayscale(b);
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut acc = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let (mut mx, mut my) = (0.0, 0.0);
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = kernel[ky * SSIM_WINDOW + kx];
                    let x = ga[(y0 + ky) * w + x0 + kx];
                    let y = gb[(y0 + ky) * w + x0 + kx];
                    mx += wgt * x;
                    my += wgt * y;
                    sxx += wgt * x * x;
                    syy += wgt * y * y;
                    sxy += wgt * x * y;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(acc / windows as f64)
}

/// Mean color over a set of images: the constant-predictor baseline.
pub fn mean_color(images: &[&Image]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        for p in &img.pixels {
            for c in 0..3 {
                acc[c] += p[c];
            }
        }
        n += img.pixels.len();
    }
    acc.map(|v| v / n.max(1) as f64)
}

/// One evaluated view.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Quality summary for one scene and split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scene_id: u64,
    pub split: Split,
    pub checkpoint_id: String,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Renders every view of `split` from the dataset's source views and scores
/// it against the ground truth.
pub fn evaluate(
    model: &MoveModel,
    store: &ParamStore,
    ds: &SceneDataset,
    settings: &RenderSettings,
    split: Split,
    checkpoint_id: &str,
) -> Result<EvalReport, MetricsError> {
    let sources: Vec<_> =
        ds.views_in(Split::Source).map(|(_, v)| (&v.camera, &v.image)).collect();
    let mut rows = Vec::new();
    for (vi, view) in ds.views_in(split) {
        let rendered = model.render_image(store, &view.camera, &sources, settings);
        rows.push(EvalRow {
            view: vi,
            psnr: psnr(&rendered.image, &view.image)?,
            ssim: ssim(&rendered.image, &view.image)?,
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(EvalReport {
        scene_id: ds.scene_id,
        split,
        checkpoint_id: checkpoint_id.to_string(),
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), MetricsError> {
    std::fs::write(path, contents).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, MetricsError> {
    std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `view,psnr,ssim` rows for one report.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut out = String::from("view,psnr,ssim\n");
    for r in &report.rows {
        writeln!(out, "{},{},{}", r.view, r.psnr, r.ssim).expect("in-memory write");
    }
    write_file(path, &out)
}

fn csv_err(path: &Path, line: usize, message: impl Into<String>) -> MetricsError {
    MetricsError::Csv { path: path.display().to_string(), line, message: message.into() }
}

fn split_fields(
    path: &Path,
    line_no: usize,
    line: &str,
    n: usize,
) -> Result<Vec<String>, MetricsError> {
    let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
    if fields.len() != n {
        return Err(csv_err(path, line_no, format!("expected {n} fields, got {}", fields.len())));
    }
    Ok(fields)
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>, MetricsError> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "view,psnr,ssim")) => {}
        _ => return Err(csv_err(path, 1, "missing `view,psnr,ssim` header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f = split_fields(path, i + 1, line, 3)?;
        let parse_f64 = |s: &str| s.parse::<f64>().map_err(|_| csv_err(path, i + 1, "bad number"));
        rows.push(EvalRow {
            view: f[0].parse().map_err(|_| csv_err(path, i + 1, "bad view index"))?,
            psnr: parse_f64(&f[1])?,
            ssim: parse_f64(&f[2])?,
        });
    }
    Ok(rows)
}

/// Fixed colors for selection patterns; the first six are maximally
/// distinct primaries/secondaries, further patterns fall on a hue wheel.
pub fn pattern_palette(n: usize) -> Vec<[f64; 3]> {
    const BASE: [[f64; 3]; 6] = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ];
    (0..n)
        .map(|i| {
            if i < BASE.len() {
                BASE[i]
            } else {
                // evenly spaced hues, full saturation and value
                let h = i as f64 / n as f64 * 6.0;
                let x = 1.0 - (h % 2.0 - 1.0).abs();
                match h as usize % 6 {
                    0 => [1.0, x, 0.0],
                    1 => [x, 1.0, 0.0],
                    2 => [0.0, 1.0, x],
                    3 => [0.0, x, 1.0],
                    4 => [x, 0.0, 1.0],
                    _ => [1.0, 0.0, x],
                }
            }
        })
        .collect()
}

/// Per-layer expert usage of one scene, plus where its files were written.
#[derive(Debug, Clone)]
pub struct SceneArtifacts {
    pub scene_id: u64,
    /// per layer, per expert; rows sum to 1
    pub usage: Vec<Vec<f64>>,
    pub map_paths: Vec<PathBuf>,
}

/// Everything `emit_expert_artifacts` produced.
#[derive(Debug, Clone)]
pub struct ExpertArtifacts {
    pub scenes: Vec<SceneArtifacts>,
    pub histogram_path: PathBuf,
    pub overlap_path: PathBuf,
}

/// For each scene: renders the first target view (falling back to the first
/// view), writes one expert-map image per view block using the fixed
/// palette, a combined usage histogram CSV, and a cross-scene overlap CSV
/// (histogram intersection, averaged over layers).
pub fn emit_expert_artifacts(
    model: &MoveModel,
    store: &ParamStore,
    datasets: &[SceneDataset],
    settings: &RenderSettings,
    out_dir: &Path,
) -> Result<ExpertArtifacts, MetricsError> {
    assert!(!datasets.is_empty(), "need at least one dataset");
    std::fs::create_dir_all(out_dir).map_err(|source| MetricsError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let palette = pattern_palette(
        combination_count(model.config.experts, model.config.top_k, 1) as usize,
    );
    let mut scenes = Vec::new();
    for ds in datasets {
        let target = ds
            .views_in(Split::Target)
            .map(|(_, v)| v)
            .next()
            .unwrap_or_else(|| &ds.views[0]);
        let sources: Vec<_> =
            ds.views_in(Split::Source).map(|(_, v)| (&v.camera, &v.image)).collect();
        let rendered = model.render_image(store, &target.camera, &sources, settings);
        let mut map_paths = Vec::new();
        for (layer, map) in rendered.expert_maps.iter().enumerate() {
            let mut img = Image::new(target.camera.width, target.camera.height);
            for (pix, &pattern) in map.iter().enumerate() {
                img.pixels[pix] = palette[pattern];
            }
            let path = out_dir.join(format!("scene_{}_layer_{layer}_experts.ppm", ds.scene_id));
            img.save_ppm(&path)?;
            map_paths.push(path);
        }
        scenes.push(SceneArtifacts { scene_id: ds.scene_id, usage: rendered.usage, map_paths });
    }

    let histogram_path = out_dir.join("expert_usage.csv");
    let mut hist = String::from("scene,layer,expert,frequency\n");
    for s in &scenes {
        for (layer, row) in s.usage.iter().enumerate() {
            for (expert, freq) in row.iter().enumerate() {
                writeln!(hist, "{},{layer},{expert},{freq}", s.scene_id).expect("in-memory write");
            }
        }
    }
    write_file(&histogram_path, &hist)?;

    let overlap_path = out_dir.join("expert_overlap.csv");
    let mut overlap = String::from("scene_a,scene_b,overlap\n");
    for a in &scenes {
        for b in &scenes {
            let layers = a.usage.len();
            let o: f64 = a
                .usage
                .iter()
                .zip(b.usage.iter())
                .map(|(ua, ub)| {
                    ua.iter().zip(ub.iter()).map(|(x, y)| x.min(*y)).sum::<f64>()
                })
                .sum::<f64>()
                / layers as f64;
            writeln!(overlap, "{},{},{o}", a.scene_id, b.scene_id).expect("in-memory write");
        }
    }
    write_file(&overlap_path, &overlap)?;
    Ok(ExpertArtifacts { scenes, histogram_path, overlap_path })
}

/// `(scene, layer, expert, frequency)` rows.
pub fn read_histogram_csv(path: &Path) -> Result<Vec<(u64, usize, usize, f64)>, MetricsError> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "scene,layer,expert,frequency")) => {}
        _ => return Err(csv_err(path, 1, "missing histogram header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f = split_fields(path, i + 1, line, 4)?;
        let bad = || csv_err(path, i + 1, "bad field");
        rows.push((
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
            f[3].parse().map_err(|_| bad())?,
        ));
    }
    Ok(rows)
}

/// `(scene_a, scene_b, overlap)` rows.
pub fn read_overlap_csv(path: &Path) -> Result<Vec<(u64, u64, f64)>, MetricsError> {
    let text = read_file(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "scene_a,scene_b,overlap")) => {}
        _ => return Err(csv_err(path, 1, "missing overlap header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f = split_fields(path, i + 1, line, 3)?;
        let bad = || csv_err(path, i + 1, "bad field");
        rows.push((
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(rows)
}
