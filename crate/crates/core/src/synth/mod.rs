//! Procedural multi-class 2-D segmentation scenes.
//!
//! Class 0 is background. Foreground classes cycle through a large ellipse,
//! a medium ring and a small disc, giving a strong size imbalance between
//! classes. Ring and disc share a similar intensity, so shape context is
//! needed to tell them apart.

mod io;
mod split;

pub use io::{load_dataset, read_scene, save_dataset, write_scene, DatasetManifest, SCENE_MAGIC};
pub use split::{make_split, plan_split, render, scene_seed, DatasetSplit, SplitPlan};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DaclError, Result};
use crate::metrics::LabelMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Every placed object covers at least this many pixels.
    pub min_organ_px: usize,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { width: 32, height: 32, num_classes: 4, min_organ_px: 9, blur: 0.8, noise_sigma: 0.12 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Ellipse,
    Ring,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDescriptor {
    pub class_id: usize,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub angle: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub shapes: Vec<ShapeDescriptor>,
    pub noise_sigma: f64,
    pub blur: f64,
    pub seed: u64,
}

/// Single-channel image in `[0, 1]` with an exact label map.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub image: Vec<f64>,
    pub label: LabelMap,
    pub meta: SceneMeta,
}

impl ToyScene {
    pub fn class_pixels(&self, class_id: usize) -> usize {
        self.label.labels.iter().filter(|&&l| l as usize == class_id).count()
    }
}

const BACKGROUND_LEVEL: f64 = 0.25;
const MAX_ATTEMPTS: usize = 500;

fn kind_for(class_id: usize) -> ShapeKind {
    match (class_id - 1) % 3 {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Ring,
        _ => ShapeKind::Disc,
    }
}

fn draw_shape<R: Rng>(class_id: usize, cfg: &SceneConfig, rng: &mut R) -> ShapeDescriptor {
    let kind = kind_for(class_id);
    let scale = cfg.width.min(cfg.height) as f64 / 32.0;
    let (radii, intensity) = match kind {
        ShapeKind::Ellipse => (
            (rng.random_range(6.5..9.5) * scale, rng.random_range(4.5..7.0) * scale),
            rng.random_range(0.52..0.62),
        ),
        ShapeKind::Ring => {
            let r = rng.random_range(4.5..6.0) * scale;
            ((r, r - 2.0 * scale), rng.random_range(0.75..0.85))
        }
        ShapeKind::Disc => {
            let r = rng.random_range(1.9..2.8) * scale;
            ((r, r), rng.random_range(0.75..0.85))
        }
    };
    let reach = radii.0.max(radii.1) + 1.0;
    let cx = rng.random_range(reach..(cfg.width as f64 - reach).max(reach + 1e-9));
    let cy = rng.random_range(reach..(cfg.height as f64 - reach).max(reach + 1e-9));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    ShapeDescriptor { class_id, kind, center: (cx, cy), radii, angle, intensity }
}

fn covers(s: &ShapeDescriptor, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - s.center.0, y - s.center.1);
    match s.kind {
        ShapeKind::Ellipse => {
            let (c, sn) = (s.angle.cos(), s.angle.sin());
            let u = dx * c + dy * sn;
            let v = -dx * sn + dy * c;
            (u / s.radii.0).powi(2) + (v / s.radii.1).powi(2) <= 1.0
        }
        ShapeKind::Ring => {
            let r = (dx * dx + dy * dy).sqrt();
            r <= s.radii.0 && r >= s.radii.1
        }
        ShapeKind::Disc => dx * dx + dy * dy <= s.radii.0 * s.radii.0,
    }
}

fn rasterize(s: &ShapeDescriptor, w: usize, h: usize) -> Vec<bool> {
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| covers(s, x as f64 + 0.5, y as f64 + 0.5))
        .collect()
}

// Rejects masks touching (8-neighborhood) anything already placed.
fn collides(mask: &[bool], occupied: &[bool], w: usize, h: usize) -> bool {
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    if occupied[ny * w + nx] {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn gaussian_blur(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / z).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<ToyScene> {
    if cfg.num_classes < 2 || cfg.num_classes > u8::MAX as usize {
        return Err(DaclError::config("num_classes", format!("{} not in [2, 255]", cfg.num_classes)));
    }
    if cfg.width < 8 || cfg.height < 8 {
        return Err(DaclError::config("width/height", "scenes must be at least 8x8"));
    }
    if cfg.noise_sigma < 0.0 || cfg.blur < 0.0 {
        return Err(DaclError::config("noise_sigma/blur", "must be non-negative"));
    }
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u8; w * h];
    let mut occupied = vec![false; w * h];
    let mut shapes = Vec::new();
    // largest objects first so small ones fill the gaps
    for class_id in 1..cfg.num_classes {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let s = draw_shape(class_id, cfg, &mut rng);
            let mask = rasterize(&s, w, h);
            let area = mask.iter().filter(|&&b| b).count();
            if area < cfg.min_organ_px || collides(&mask, &occupied, w, h) {
                continue;
            }
            for (i, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
                labels[i] = class_id as u8;
                occupied[i] = true;
            }
            shapes.push(s);
            placed = true;
            break;
        }
        if !placed {
            return Err(DaclError::Generation(format!(
                "could not place class {class_id} after {MAX_ATTEMPTS} attempts (seed {seed})"
            )));
        }
    }

    let mut image: Vec<f64> = labels
        .iter()
        .map(|&l| if l == 0 { BACKGROUND_LEVEL } else { shapes[l as usize - 1].intensity })
        .collect();
    if cfg.blur > 0.0 {
        image = gaussian_blur(&image, w, h, cfg.blur);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        image.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(ToyScene {
        id: seed,
        width: w,
        height: h,
        num_classes: cfg.num_classes,
        image,
        label: LabelMap::new(w, h, labels)?,
        meta: SceneMeta { shapes, noise_sigma: cfg.noise_sigma, blur: cfg.blur, seed },
    })
}

/// `n` scenes with ids `base_seed..base_seed + n`.
pub fn generate_corpus(base_seed: u64, n: usize, cfg: &SceneConfig) -> Result<Vec<ToyScene>> {
    crate::parallel::Exec::default()
        .map_range(n, |i| generate_scene(base_seed.wrapping_add(i as u64), cfg))
        .into_iter()
        .collect()
}
