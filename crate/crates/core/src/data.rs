//! Crowd scene data: point annotations, ground-truth density and
//! localization maps, seeded synthetic scene generation, augmentation, and
//! the annotation file format.
//!
//! Ground-truth maps live on the model's native 1/8-resolution grid. Each
//! point deposits a separable Gaussian evaluated at cell centers, truncated
//! at 4σ and normalized over the in-map cells it touches, so every point
//! contributes unit mass and the map's sum counts the crowd.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::uniform;
use crate::ppm;
use crate::tensor::Tensor;

/// One head-center annotation, origin at the top-left, `0 ≤ x < W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
}

/// An image with its head-center points.
#[derive(Debug, Clone)]
pub struct Scene {
    /// `[3, H, W]` with values in [0, 1]; H and W divisible by 8.
    pub image: Tensor,
    pub points: Vec<PointAnnotation>,
}

impl Scene {
    pub fn new(image: Tensor, points: Vec<PointAnnotation>) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::InvalidArgument(format!(
                "scene image must be [3,H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "scene size {h}x{w} must be divisible by 8"
            )));
        }
        for (index, p) in points.iter().enumerate() {
            if !(0.0..w as f64).contains(&p.x) || !(0.0..h as f64).contains(&p.y) {
                return Err(Error::PointOutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    w,
                    h,
                });
            }
        }
        Ok(Scene { image, points })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Per-cell people mass at 1/8 input resolution; sums to the count.
#[derive(Debug, Clone)]
pub struct DensityMap {
    /// `[1, H/8, W/8]`.
    pub grid: Tensor,
}

impl DensityMap {
    pub fn total_mass(&self) -> f64 {
        self.grid.sum()
    }
}

/// Peaked heat map marking head centers, same construction as the density
/// map with a sharper kernel.
#[derive(Debug, Clone)]
pub struct LocalizationMap {
    /// `[1, H/8, W/8]`.
    pub grid: Tensor,
}

impl LocalizationMap {
    pub fn total_mass(&self) -> f64 {
        self.grid.sum()
    }
}

/// 1-D Gaussian weights at cell centers `c+0.5` within 4σ of `center`,
/// clipped to `[0, len)` and paired with their distances.
///
/// The normalizing sum adds weights in increasing-distance order: mirrored
/// windows sum the same value sequence, which keeps ground-truth generation
/// bitwise flip-equivariant.
fn axis_weights(center: f64, sigma: f64, len: usize) -> Vec<(usize, f64)> {
    let radius = 4.0 * sigma;
    let lo = ((center - radius - 0.5).ceil() as isize).max(0);
    let hi = ((center + radius - 0.5).floor() as isize).min(len as isize - 1);
    let mut cells = Vec::new();
    for c in lo..=hi {
        let d = (c as f64 + 0.5) - center;
        cells.push((
            c as usize,
            d.abs(),
            (-(d * d) / (2.0 * sigma * sigma)).exp(),
        ));
    }
    if cells.is_empty() {
        // Kernel narrower than a cell: all mass goes to the nearest cell.
        let c = (center.floor() as isize).clamp(0, len as isize - 1) as usize;
        return vec![(c, 1.0)];
    }
    let mut by_distance: Vec<(f64, f64)> = cells.iter().map(|&(_, d, w)| (d, w)).collect();
    by_distance.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances"));
    let norm: f64 = by_distance.iter().map(|&(_, w)| w).sum();
    cells.into_iter().map(|(c, _, w)| (c, w / norm)).collect()
}

fn deposit_gaussians(points: &[PointAnnotation], h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "kernel sigma must be positive, got {sigma}"
        )));
    }
    let mut grid = vec![0.0; h * w];
    for p in points {
        let col_weights = axis_weights(p.x / 8.0, sigma, w);
        let row_weights = axis_weights(p.y / 8.0, sigma, h);
        for &(r, wy) in &row_weights {
            for &(c, wx) in &col_weights {
                grid[r * w + c] += wy * wx;
            }
        }
    }
    Tensor::new(&[1, h, w], grid)
}

/// Ground-truth density map: one unit of mass per point, spread by a
/// Gaussian of `sigma` cells.
pub fn generate_density_gt(scene: &Scene, sigma: f64) -> Result<DensityMap> {
    let grid = deposit_gaussians(&scene.points, scene.height() / 8, scene.width() / 8, sigma)?;
    Ok(DensityMap { grid })
}

/// Ground-truth localization map: the density construction with a sharper
/// kernel (default 1 cell), peaking at head centers.
pub fn generate_localization_gt(scene: &Scene, sigma_loc: f64) -> Result<LocalizationMap> {
    let grid = deposit_gaussians(
        &scene.points,
        scene.height() / 8,
        scene.width() / 8,
        sigma_loc,
    )?;
    Ok(LocalizationMap { grid })
}

/// Synthetic scene layout.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub h: usize,
    pub w: usize,
    /// Inclusive range of blob counts.
    pub count_range: (usize, usize),
    /// Blob radius range in pixels; the effective radius grows toward the
    /// bottom of the frame to imitate perspective.
    pub blob_radius_range: (f64, f64),
    /// Blob centers stay at least this many pixels from every border.
    pub margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            h: 64,
            w: 64,
            count_range: (4, 10),
            blob_radius_range: (2.0, 5.0),
            margin: 8.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if !self.h.is_multiple_of(8) || !self.w.is_multiple_of(8) || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidArgument(format!(
                "scene size {}x{} must be positive and divisible by 8",
                self.h, self.w
            )));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::InvalidArgument("empty count range".into()));
        }
        let (rlo, rhi) = self.blob_radius_range;
        if rlo <= 0.0 || rhi < rlo {
            return Err(Error::InvalidArgument("bad blob radius range".into()));
        }
        if self.margin < 1.0 || 2.0 * self.margin >= self.w.min(self.h) as f64 {
            return Err(Error::InvalidArgument(format!(
                "margin {} leaves no room in {}x{}",
                self.margin, self.h, self.w
            )));
        }
        Ok(())
    }
}

/// Coordinates snap to the 1/8-pixel grid so mirrored coordinates stay
/// exactly representable.
fn snap(v: f64) -> f64 {
    (v * 8.0).round() / 8.0
}

/// Render a seeded synthetic crowd scene: dark elliptical blobs, larger
/// toward the bottom of the frame, over a textured background. Blob centers
/// are the point annotations. Identical seeds give bitwise-identical scenes.
pub fn synth_scene(seed: u64, config: &SynthConfig) -> Result<Scene> {
    config.validate()?;
    let (h, w) = (config.h, config.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Textured background: vertical gradient plus pixel noise, per channel.
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let base = 0.55 + 0.2 * (y as f64 / h as f64);
            let noise = uniform(&mut rng, -0.06, 0.06);
            for c in 0..3 {
                let tint = [0.02, 0.0, -0.02][c];
                image[(c * h + y) * w + x] = (base + noise + tint).clamp(0.0, 1.0);
            }
        }
    }

    let count = rng.random_range(config.count_range.0..=config.count_range.1);
    let (rlo, rhi) = config.blob_radius_range;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = snap(uniform(&mut rng, config.margin, w as f64 - config.margin));
        let y = snap(uniform(&mut rng, config.margin, h as f64 - config.margin));
        let depth = y / h as f64;
        let radius = (rlo + (rhi - rlo) * depth) * uniform(&mut rng, 0.85, 1.15);
        let radius = radius.max(0.75);
        let rx = 0.75 * radius;
        let darkness = uniform(&mut rng, 0.05, 0.25);

        let y_lo = ((y - radius).floor().max(0.0)) as usize;
        let y_hi = ((y + radius).ceil() as usize).min(h);
        let x_lo = ((x - rx).floor().max(0.0)) as usize;
        let x_hi = ((x + rx).ceil() as usize).min(w);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let dx = (px as f64 + 0.5 - x) / rx;
                let dy = (py as f64 + 0.5 - y) / radius;
                let d = dx * dx + dy * dy;
                if d < 1.0 {
                    let alpha = ((1.0 - d) * 3.0).min(1.0);
                    for c in 0..3 {
                        let idx = (c * h + py) * w + px;
                        image[idx] += alpha * (darkness - image[idx]);
                    }
                }
            }
        }
        points.push(PointAnnotation { x, y });
    }

    Scene::new(Tensor::new(&[3, h, w], image)?, points)
}

/// Mirror a `[C,H,W]` tensor about the vertical axis.
pub fn hflip_image(t: &Tensor) -> Tensor {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "hflip_image expects [C,H,W]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for y in 0..h {
            let row = (ci * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + (w - 1 - x)];
            }
        }
    }
    Tensor::new(shape, out).expect("same shape")
}

/// Mirror a scene horizontally: the image columns reverse and every point
/// reflects about the vertical midline (`x ↦ W − x`; the `x = 0` edge wraps
/// to 0 so coordinates stay in range).
pub fn hflip_scene(scene: &Scene) -> Scene {
    let w = scene.width() as f64;
    let points = scene
        .points
        .iter()
        .map(|p| {
            let x = w - p.x;
            PointAnnotation {
                x: if x >= w { 0.0 } else { x },
                y: p.y,
            }
        })
        .collect();
    Scene {
        image: hflip_image(&scene.image),
        points,
    }
}

/// Deterministic crop-and-flip core. `x0`/`y0` are pixel offsets aligned to
/// the 8-pixel grid so ground-truth cells stay aligned.
pub fn apply_augment(
    scene: &Scene,
    gt_d: &DensityMap,
    gt_l: &LocalizationMap,
    x0: usize,
    y0: usize,
    crop: usize,
    flip: bool,
) -> Result<(Scene, DensityMap, LocalizationMap)> {
    let (h, w) = (scene.height(), scene.width());
    if crop == 0 || !crop.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "crop size {crop} must be a positive multiple of 8"
        )));
    }
    if crop > h.min(w) || x0 + crop > w || y0 + crop > h {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} at ({x0},{y0}) exceeds the {h}x{w} scene"
        )));
    }
    if !x0.is_multiple_of(8) || !y0.is_multiple_of(8) {
        return Err(Error::InvalidArgument(
            "crop offsets must align to the 8-pixel grid".into(),
        ));
    }

    let src = scene.image.data();
    let mut img = vec![0.0; 3 * crop * crop];
    for c in 0..3 {
        for y in 0..crop {
            let srow = (c * h + y0 + y) * w + x0;
            img[(c * crop + y) * crop..][..crop].copy_from_slice(&src[srow..srow + crop]);
        }
    }
    let crop_cells = crop / 8;
    let cut = |grid: &Tensor| -> Tensor {
        let (gh, gw) = (grid.shape()[1], grid.shape()[2]);
        assert_eq!((gh, gw), (h / 8, w / 8), "ground truth grid size");
        let g = grid.data();
        let mut out = vec![0.0; crop_cells * crop_cells];
        for y in 0..crop_cells {
            let srow = (y0 / 8 + y) * gw + x0 / 8;
            out[y * crop_cells..][..crop_cells].copy_from_slice(&g[srow..srow + crop_cells]);
        }
        Tensor::new(&[1, crop_cells, crop_cells], out).expect("valid crop")
    };
    let mut d = DensityMap {
        grid: cut(&gt_d.grid),
    };
    let mut l = LocalizationMap {
        grid: cut(&gt_l.grid),
    };

    let points: Vec<PointAnnotation> = scene
        .points
        .iter()
        .filter(|p| {
            p.x >= x0 as f64
                && p.x < (x0 + crop) as f64
                && p.y >= y0 as f64
                && p.y < (y0 + crop) as f64
        })
        .map(|p| PointAnnotation {
            x: p.x - x0 as f64,
            y: p.y - y0 as f64,
        })
        .collect();
    let mut out_scene = Scene::new(Tensor::new(&[3, crop, crop], img)?, points)?;

    if flip {
        out_scene = hflip_scene(&out_scene);
        d.grid = hflip_image(&d.grid);
        l.grid = hflip_image(&l.grid);
    }
    Ok((out_scene, d, l))
}

/// One random 8-aligned crop plus an independent horizontal flip with
/// probability 1/2, applied consistently to the image and both ground truths.
pub fn augment(
    scene: &Scene,
    gt_d: &DensityMap,
    gt_l: &LocalizationMap,
    crop: usize,
    seed: u64,
) -> Result<(Scene, DensityMap, LocalizationMap)> {
    let (h, w) = (scene.height(), scene.width());
    if crop > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} exceeds scene size {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = 8 * rng.random_range(0..=(w - crop) / 8);
    let y0 = 8 * rng.random_range(0..=(h - crop) / 8);
    let flip = rng.random_bool(0.5);
    apply_augment(scene, gt_d, gt_l, x0, y0, crop, flip)
}

fn image_path_for(path: &Path) -> PathBuf {
    path.with_extension("ppm")
}

/// Write the annotation file (`H W count`, then one `x y` line per point)
/// and the scene image as a PPM with the same basename.
pub fn save_annotations(scene: &Scene, path: &Path) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{} {} {}",
        scene.height(),
        scene.width(),
        scene.count()
    );
    for p in &scene.points {
        let _ = writeln!(text, "{} {}", p.x, p.y);
    }
    std::fs::write(path, text)?;
    ppm::write_ppm(&image_path_for(path), &scene.image)
}

/// Load a scene saved by [`save_annotations`]. Coordinates round-trip
/// exactly; the image comes back at 8-bit resolution.
pub fn load_annotations(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty annotation file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::MalformedHeader(format!(
            "expected `H W count`, got `{header}`"
        )));
    }
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::MalformedHeader(format!("bad header field `{s}`")))
    };
    let h = parse_dim(fields[0])?;
    let w = parse_dim(fields[1])?;
    let count = parse_dim(fields[2])?;
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::MalformedHeader(format!(
            "scene size {h}x{w} must be positive and divisible by 8"
        )));
    }

    let mut points = Vec::with_capacity(count);
    for (index, line) in lines.enumerate() {
        if points.len() == count {
            return Err(Error::PointCountMismatch {
                expected: count,
                found: count + 1,
            });
        }
        let coords: Vec<&str> = line.split_whitespace().collect();
        if coords.len() != 2 {
            return Err(Error::MalformedHeader(format!(
                "point line {index} must be `x y`, got `{line}`"
            )));
        }
        let parse_coord = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::MalformedHeader(format!("bad coordinate `{s}`")))
        };
        let x = parse_coord(coords[0])?;
        let y = parse_coord(coords[1])?;
        if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
            return Err(Error::PointOutOfBounds { index, x, y, w, h });
        }
        points.push(PointAnnotation { x, y });
    }
    if points.len() != count {
        return Err(Error::PointCountMismatch {
            expected: count,
            found: points.len(),
        });
    }

    let image = ppm::read_ppm(&image_path_for(path))?;
    if image.shape() != [3, h, w] {
        return Err(Error::MalformedImage(format!(
            "image is {:?}, annotations say {h}x{w}",
            image.shape()
        )));
    }
    Scene::new(image, points)
}

/// Load every `.txt` annotation in a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "txt").unwrap_or(false))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_annotations(p)).collect()
}
