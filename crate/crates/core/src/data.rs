//! Procedural synthetic scenes: layered geometric shapes with flat-plus-noise
//! textures, a deterministic illumination gradient, and an optional hue link
//! between two designated classes. Also ingests external image/mask pairs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::SemanticMask;

/// Classes 1 and 2 are the hue-linked pair when `style_correlation` > 0.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub resolution: usize,
    pub style_correlation: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(num_classes: usize, resolution: usize, seed: u64) -> Self {
        SceneConfig {
            num_classes,
            resolution,
            style_correlation: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("scene: need at least background + 1 class".into()));
        }
        if self.resolution == 0 {
            return Err(Error::Config("scene: resolution must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.style_correlation) {
            return Err(Error::Config(format!(
                "scene: style_correlation {} outside [0, 1]",
                self.style_correlation
            )));
        }
        Ok(())
    }
}

/// One training example: image as [3, R, R] values in [-1, 1], plus mask.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub image: Vec<f32>,
    pub mask: SemanticMask,
}

fn scene_rng(cfg: &SceneConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

// per-class hues in [0, 1); classes 1 and 2 share a color family with
// probability style_correlation
fn draw_hues(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<f64> {
    let mut hues: Vec<f64> = (0..cfg.num_classes).map(|_| rng.gen::<f64>()).collect();
    let linked = rng.gen::<f64>() < cfg.style_correlation;
    if cfg.num_classes > 2 && linked {
        let jitter = (rng.gen::<f64>() - 0.5) * 0.04;
        hues[2] = (hues[1] + jitter).rem_euclid(1.0);
    }
    hues
}

/// Hues drawn for scene `index`; exposed so correlation statistics can be
/// checked without re-deriving them from pixels.
pub fn scene_hues(cfg: &SceneConfig, index: u64) -> Vec<f64> {
    draw_hues(&mut scene_rng(cfg, index), cfg)
}

/// Circular distance between two hues in [0, 1).
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Stripe { horizontal: bool, pos: f64, half: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= *x0 && x <= *x1 && y >= *y0 && y <= *y1,
            Shape::Stripe { horizontal, pos, half } => {
                let c = if *horizontal { y } else { x };
                (c - pos).abs() <= *half
            }
        }
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, class: usize) -> Shape {
    match (class - 1) % 3 {
        0 => Shape::Disk {
            cx: rng.gen_range(0.2..0.8),
            cy: rng.gen_range(0.2..0.8),
            r: rng.gen_range(0.12..0.3),
        },
        1 => {
            let x0 = rng.gen_range(0.05..0.55);
            let y0 = rng.gen_range(0.05..0.55);
            Shape::Rect {
                x0,
                y0,
                x1: x0 + rng.gen_range(0.15..0.4),
                y1: y0 + rng.gen_range(0.15..0.4),
            }
        }
        _ => Shape::Stripe {
            horizontal: rng.gen::<bool>(),
            pos: rng.gen_range(0.1..0.9),
            half: rng.gen_range(0.04..0.1),
        },
    }
}

/// Deterministic in (config.seed, index): later classes paint over earlier
/// ones, background fills the residue, so the mask is one-hot everywhere.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg, index);
    let r = cfg.resolution;
    let hues = draw_hues(&mut rng, cfg);
    let colors: Vec<[f64; 3]> = hues
        .iter()
        .map(|&h| hsv_to_rgb(h, rng.gen_range(0.5..0.8), rng.gen_range(0.55..0.9)))
        .collect();
    let shapes: Vec<Shape> = (1..cfg.num_classes)
        .map(|j| draw_shape(&mut rng, j))
        .collect();

    let mut indices = vec![0u8; r * r];
    for (j, shape) in shapes.iter().enumerate() {
        for y in 0..r {
            for x in 0..r {
                let fx = (x as f64 + 0.5) / r as f64;
                let fy = (y as f64 + 0.5) / r as f64;
                if shape.contains(fx, fy) {
                    indices[y * r + x] = (j + 1) as u8;
                }
            }
        }
    }

    let denom = (2 * (r.max(2) - 1)) as f64;
    let mut image = vec![0.0f32; 3 * r * r];
    for y in 0..r {
        for x in 0..r {
            let class = indices[y * r + x] as usize;
            // diagonal illumination gradient across the canvas
            let light = 0.75 + 0.5 * (x + y) as f64 / denom;
            for ch in 0..3 {
                let noise = (rng.gen::<f64>() - 0.5) * 0.1;
                let v = (colors[class][ch] * light + noise).clamp(0.0, 1.0);
                image[(ch * r + y) * r + x] = (2.0 * v - 1.0) as f32;
            }
        }
    }
    let mask = SemanticMask::from_indices(&indices, cfg.num_classes, r, r)?;
    Ok(ScenePair { image, mask })
}

/// [-1, 1] float channel-major image to 8-bit PNG.
pub fn save_image_png(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    if data.len() != 3 * h * w {
        return Err(Error::Dim(format!(
            "image length {} != 3x{h}x{w}",
            data.len()
        )));
    }
    let mut buf = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (data[(ch * h + y) * w + x] + 1.0) * 0.5;
                buf[(y * w + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Data("failed to assemble RGB buffer".into()))?;
    Ok(img.save(path)?)
}

/// Class-index mask to 8-bit grayscale PNG.
pub fn save_mask_png(path: &Path, mask: &SemanticMask) -> Result<()> {
    let img = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.to_indices(),
    )
    .ok_or_else(|| Error::Data("failed to assemble mask buffer".into()))?;
    Ok(img.save(path)?)
}

/// Write `count` scenes as `images/NNNN.png` + `masks/NNNN.png`.
pub fn save_dataset(dir: &Path, cfg: &SceneConfig, count: usize) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    for i in 0..count {
        let pair = generate_scene(cfg, i as u64)?;
        save_image_png(&images.join(format!("{i:04}.png")), &pair.image, cfg.resolution, cfg.resolution)?;
        save_mask_png(&masks.join(format!("{i:04}.png")), &pair.mask)?;
    }
    Ok(())
}

/// Load an RGB image (scaled to [-1, 1]) and an 8-bit index mask.
pub fn load_pair(
    image_path: &Path,
    mask_path: &Path,
    num_classes: usize,
) -> Result<(Vec<f32>, SemanticMask)> {
    let img = image::open(image_path)
        .map_err(|e| Error::Data(format!("{}: {e}", image_path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px.0[ch] as f32 / 127.5 - 1.0;
        }
    }
    let m = image::open(mask_path)
        .map_err(|e| Error::Data(format!("{}: {e}", mask_path.display())))?
        .to_luma8();
    if (m.width() as usize, m.height() as usize) != (w, h) {
        return Err(Error::Data(format!(
            "mask {}x{} does not match image {w}x{h}",
            m.width(),
            m.height()
        )));
    }
    let indices: Vec<u8> = m.into_raw();
    let mask = SemanticMask::from_indices(&indices, num_classes, h, w)?;
    Ok((data, mask))
}
