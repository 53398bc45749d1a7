//! Bi-temporal samples: synthetic generation, augmentation and the on-disk layout
//! `A/<id>.png`, `B/<id>.png`, `label/<id>.png` (label 0 = background, 255 = change).

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{Shape, Tensor};

/// One co-registered image pair with its change mask. Images are `(1, 3, H, W)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub img_a: Tensor<f32>,
    pub img_b: Tensor<f32>,
    pub mask: BinaryMask,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, img_a: Tensor<f32>, img_b: Tensor<f32>, mask: BinaryMask) -> Result<Self> {
        let s = img_a.shape();
        if s != img_b.shape() || s.n() != 1 || s.c() != 3 || (s.h(), s.w()) != (mask.height(), mask.width()) {
            return Err(Error::InvalidArgument(format!(
                "sample images {s} / {} and mask {}x{} are not aligned",
                img_b.shape(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(SamplePair { id: id.into(), img_a, img_b, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    /// Changed shapes per sample, inclusive range. `max_changes = 0` yields no changes.
    pub min_changes: usize,
    pub max_changes: usize,
    /// Shapes drawn identically in both images.
    pub max_distractors: usize,
    /// Shape side length as a fraction of the image side, inclusive range.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Accepted fraction of changed pixels; shapes are redrawn until the mask falls inside.
    pub min_mask_fraction: f64,
    pub max_mask_fraction: f64,
    /// Per-image brightness offset and contrast jitter amplitudes, and pixel noise std.
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            min_changes: 1,
            max_changes: 3,
            max_distractors: 2,
            min_extent: 0.25,
            max_extent: 0.5,
            min_mask_fraction: 0.05,
            max_mask_fraction: 0.30,
            brightness_jitter: 0.05,
            contrast_jitter: 0.1,
            noise_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Figure {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Figure {
    fn random(rng: &mut ChaCha8Rng, size: usize, cfg: &SynthConfig) -> Self {
        let s = size as f64;
        let ext = |rng: &mut ChaCha8Rng| rng.random_range(cfg.min_extent..=cfg.max_extent) * s;
        let (h, w) = (ext(rng), ext(rng));
        let y0 = rng.random_range(0.0..=(s - h).max(0.0));
        let x0 = rng.random_range(0.0..=(s - w).max(0.0));
        if rng.random_bool(0.5) {
            Figure::Rect { y0: y0.floor(), x0: x0.floor(), y1: (y0 + h).floor(), x1: (x0 + w).floor() }
        } else {
            Figure::Ellipse { cy: y0 + h / 2.0, cx: x0 + w / 2.0, ry: h / 2.0, rx: w / 2.0 }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Figure::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
            Figure::Ellipse { cy, cx, ry, rx } => ((py - cy) / ry).powi(2) + ((px - cx) / rx).powi(2) <= 1.0,
        }
    }
}

/// Planar `[3][H][W]` image buffer.
type Planes = Vec<f32>;

fn random_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Planes {
    let base = random_colour(rng).map(|c| 0.25 + 0.5 * c);
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * std::f32::consts::TAU / size as f32,
                rng.random_range(0.5..3.0) * std::f32::consts::TAU / size as f32,
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.03..0.1),
            )
        })
        .collect();
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let tex: f32 = waves
                    .iter()
                    .map(|&(fy, fx, ph, amp)| amp * (fy * y as f32 + fx * x as f32 + ph + c as f32).sin())
                    .sum();
                out[(c * size + y) * size + x] = base[c] + tex + rng.random_range(-0.03..0.03);
            }
        }
    }
    out
}

fn paint(img: &mut Planes, size: usize, fig: &Figure, colour: [f32; 3]) {
    for y in 0..size {
        for x in 0..size {
            if fig.contains(y, x) {
                for (c, &v) in colour.iter().enumerate() {
                    img[(c * size + y) * size + x] = v;
                }
            }
        }
    }
}

fn jitter(img: &mut Planes, rng: &mut ChaCha8Rng, cfg: &SynthConfig) {
    let b = rng.random_range(-cfg.brightness_jitter..=cfg.brightness_jitter) as f32;
    let k = rng.random_range(1.0 - cfg.contrast_jitter..=1.0 + cfg.contrast_jitter) as f32;
    let noise = rand_distr::Normal::new(0.0f32, cfg.noise_std as f32).expect("noise std");
    for v in img.iter_mut() {
        let n: f32 = rng.sample(noise);
        *v = ((*v - 0.5) * k + 0.5 + b + n).clamp(0.0, 1.0);
    }
}

/// Mix a base seed with stream coordinates (splitmix64 finalizer per part).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const MAX_REDRAWS: usize = 200;

/// Generate one synthetic pair: a shared textured background and distractor shapes, with
/// shapes added to or removed from the second image; the mask is the union of altered regions.
pub fn synth_sample(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SamplePair> {
    let size = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64]));
    let bg = background(&mut rng, size);
    let mut a = bg.clone();
    for _ in 0..rng.random_range(0..=cfg.max_distractors) {
        let fig = Figure::random(&mut rng, size, cfg);
        paint(&mut a, size, &fig, random_colour(&mut rng));
    }
    let mut b = a.clone();
    let mut mask = vec![0u8; size * size];
    if cfg.max_changes > 0 {
        let band = cfg.min_mask_fraction..=cfg.max_mask_fraction;
        let mut accepted = None;
        for _ in 0..MAX_REDRAWS {
            let n = rng.random_range(cfg.min_changes.max(1)..=cfg.max_changes);
            let figs: Vec<_> = (0..n)
                .map(|_| (Figure::random(&mut rng, size, cfg), random_colour(&mut rng), rng.random_bool(0.5)))
                .collect();
            let covered = (0..size * size)
                .filter(|&i| figs.iter().any(|(f, _, _)| f.contains(i / size, i % size)))
                .count();
            if band.contains(&(covered as f64 / (size * size) as f64)) {
                accepted = Some(figs);
                break;
            }
        }
        let figs = accepted.ok_or_else(|| {
            Error::Config(format!("could not place shapes covering {band:?} of a {size}x{size} image"))
        })?;
        for (fig, colour, added) in &figs {
            let target = if *added { &mut b } else { &mut a };
            paint(target, size, fig, *colour);
            for (i, m) in mask.iter_mut().enumerate() {
                if fig.contains(i / size, i % size) {
                    *m = 1;
                }
            }
        }
    }
    jitter(&mut a, &mut rng, cfg);
    jitter(&mut b, &mut rng, cfg);
    let shape = Shape::new(1, 3, size, size);
    SamplePair::new(
        format!("{index:05}"),
        Tensor::new(shape, a)?,
        Tensor::new(shape, b)?,
        BinaryMask::new(size, size, mask)?,
    )
}

/// `count` samples with ids `first_index..first_index + count`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64, first_index: usize, count: usize) -> Result<Vec<SamplePair>> {
    if cfg.size == 0 || !cfg.size.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Indivisible { size: cfg.size, multiple: INPUT_MULTIPLE });
    }
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if cfg.min_changes > cfg.max_changes || cfg.min_extent > cfg.max_extent || cfg.min_extent <= 0.0 {
        return Err(Error::Config("synthetic shape ranges are inverted or empty".into()));
    }
    (first_index..first_index + count).map(|i| synth_sample(cfg, seed, i)).collect()
}

/// Geometric and photometric augmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub flip: bool,
    pub photometric: bool,
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            flip: true,
            photometric: true,
            brightness: 0.2,
            contrast: (0.8, 1.25),
            saturation: (0.8, 1.25),
        }
    }
}

/// The geometric part of an augmentation, shared by both images and the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry { quarter_turns: 0, hflip: false, vflip: false };

    /// Source `(y, x)` for destination `(y, x)` in an output of size `out_h × out_w`.
    fn source(&self, y: usize, x: usize, out_h: usize, out_w: usize) -> (usize, usize) {
        let y = if self.vflip { out_h - 1 - y } else { y };
        let x = if self.hflip { out_w - 1 - x } else { x };
        // undo counter-clockwise quarter turns one at a time
        let (mut y, mut x, mut h, mut w) = (y, x, out_h, out_w);
        for _ in 0..self.quarter_turns % 4 {
            // dest (y, x) of a ccw turn came from src (x, w_src - 1 - y) with w_src = h
            let (ny, nx) = (x, h - 1 - y);
            y = ny;
            x = nx;
            std::mem::swap(&mut h, &mut w);
        }
        (y, x)
    }

    fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn apply_image(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let [n, c, h, w] = img.shape().0;
        let (oh, ow) = self.output_dims(h, w);
        Tensor::from_fn(Shape::new(n, c, oh, ow), |[i, ch, y, x]| {
            let (sy, sx) = self.source(y, x, oh, ow);
            img.at(i, ch, sy, sx)
        })
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (oh, ow) = self.output_dims(mask.height(), mask.width());
        let mut data = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, oh, ow);
                data.push(mask.get(sy, sx));
            }
        }
        BinaryMask::new(oh, ow, data).expect("permuted binary mask")
    }
}

#[derive(Debug, Clone, Copy)]
enum Photo {
    Brightness(f32),
    Contrast(f32),
    Saturation(f32),
}

fn photometric(img: &mut Tensor<f32>, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) {
    let mut ops = Vec::with_capacity(3);
    if rng.random_bool(0.5) {
        ops.push(Photo::Brightness(rng.random_range(-cfg.brightness..=cfg.brightness) as f32));
    }
    if rng.random_bool(0.5) {
        ops.push(Photo::Contrast(rng.random_range(cfg.contrast.0..=cfg.contrast.1) as f32));
    }
    if rng.random_bool(0.5) {
        ops.push(Photo::Saturation(rng.random_range(cfg.saturation.0..=cfg.saturation.1) as f32));
    }
    ops.shuffle(rng);
    let [n, _, h, w] = img.shape().0;
    let plane = h * w;
    let data = img.data_mut();
    for op in ops {
        match op {
            Photo::Brightness(d) => data.iter_mut().for_each(|v| *v = (*v + d).clamp(0.0, 1.0)),
            Photo::Contrast(k) => data.iter_mut().for_each(|v| *v = ((*v - 0.5) * k + 0.5).clamp(0.0, 1.0)),
            Photo::Saturation(k) => {
                for i in 0..n {
                    let base = i * 3 * plane;
                    for p in 0..plane {
                        let (r, g, b) = (data[base + p], data[base + plane + p], data[base + 2 * plane + p]);
                        let grey = 0.299 * r + 0.587 * g + 0.114 * b;
                        for ch in 0..3 {
                            let v = &mut data[base + ch * plane + p];
                            *v = (grey + k * (*v - grey)).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
}

/// Random quarter-turn rotation and flips applied identically to both images and the mask,
/// then photometric distortion drawn independently for each image.
pub fn augment(s: &SamplePair, seed: u64, cfg: &AugmentConfig) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry {
        quarter_turns: if cfg.rotate { rng.random_range(0..4) } else { 0 },
        hflip: cfg.flip && rng.random_bool(0.5),
        vflip: cfg.flip && rng.random_bool(0.5),
    };
    let mut img_a = geo.apply_image(&s.img_a);
    let mut img_b = geo.apply_image(&s.img_b);
    if cfg.photometric {
        photometric(&mut img_a, &mut rng, cfg);
        photometric(&mut img_b, &mut rng, cfg);
    }
    SamplePair { id: s.id.clone(), img_a, img_b, mask: geo.apply_mask(&s.mask) }
}

/// Crop the same window from both images and the mask.
pub fn crop(s: &SamplePair, y0: usize, x0: usize, h: usize, w: usize) -> Result<SamplePair> {
    let mask_rows: Vec<u8> = (y0..y0 + h)
        .flat_map(|y| (x0..x0 + w).map(move |x| (y, x)))
        .map(|(y, x)| if y < s.height() && x < s.width() { s.mask.get(y, x) } else { 0 })
        .collect();
    SamplePair::new(
        s.id.clone(),
        s.img_a.crop(y0, x0, h, w)?,
        s.img_b.crop(y0, x0, h, w)?,
        BinaryMask::new(h, w, mask_rows)?,
    )
}

pub fn tensor_to_rgb(img: &Tensor<f32>) -> Result<RgbImage> {
    let [n, c, h, w] = img.shape().0;
    if n != 1 || c != 3 {
        return Err(Error::InvalidArgument(format!("expected a (1, 3, H, W) image, got {}", img.shape())));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb([q(img.at(0, 0, y, x)), q(img.at(0, 1, y, x)), q(img.at(0, 2, y, x))])
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0)
}

/// 0/255 grayscale rendering of a mask.
pub fn mask_to_image(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize) * 255])
    })
}

/// Any nonzero label pixel counts as change.
pub fn image_to_mask(img: &GrayImage) -> BinaryMask {
    let data = img.pixels().map(|p| (p.0[0] > 127) as u8).collect();
    BinaryMask::new(img.height() as usize, img.width() as usize, data).expect("binary by construction")
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn save_dataset(dir: &Path, samples: &[SamplePair]) -> Result<()> {
    for s in samples {
        let name = format!("{}.png", s.id);
        save_png(&tensor_to_rgb(&s.img_a)?.into(), &dir.join("A").join(&name))?;
        save_png(&tensor_to_rgb(&s.img_b)?.into(), &dir.join("B").join(&name))?;
        save_png(&mask_to_image(&s.mask).into(), &dir.join("label").join(&name))?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::image(path, e))
}

/// Load every `A/<id>.png` that has matching `B/` and `label/` files, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    let a_dir = dir.join("A");
    let mut ids: Vec<String> = fs::read_dir(&a_dir)
        .map_err(|e| Error::io(&a_dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| {
            let p = entry.path();
            (p.extension().is_some_and(|e| e == "png")).then(|| p.file_stem()?.to_str().map(str::to_owned))?
        })
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let name = format!("{id}.png");
            let a = rgb_to_tensor(&open(&dir.join("A").join(&name))?.to_rgb8());
            let b = rgb_to_tensor(&open(&dir.join("B").join(&name))?.to_rgb8());
            let mask = image_to_mask(&open(&dir.join("label").join(&name))?.to_luma8());
            SamplePair::new(id, a, b, mask)
        })
        .collect()
}
