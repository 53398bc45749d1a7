//! Cosine-similarity diagnostics: per-level channel maps and spatial vectors of the backbone
//! features, and the whole-image cosine of the raw RGB pair.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::autograd::Graph;
use crate::csdw::{channel_similarity_map, spatial_similarity_vector, COSINE_EPS};
use crate::data::save_png;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSimilarity {
    /// 1-based, finest first.
    pub level: usize,
    /// `(1, 1, h, w)` per-pixel cosine across channels.
    pub phi_c: Tensor<f32>,
    /// Per-channel cosine across space.
    pub phi_s: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub levels: Vec<LevelSimilarity>,
    pub rgb_cosine: f64,
}

/// Cosine between the two images flattened over all channels and pixels.
pub fn rgb_cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "rgb_cosine", left: a.shape(), right: b.shape() });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok(dot / (na.sqrt().max(COSINE_EPS) * nb.sqrt().max(COSINE_EPS)))
}

pub fn analyze_similarity(model: &Model<f32>, img_a: &Tensor<f32>, img_b: &Tensor<f32>) -> Result<SimilarityReport> {
    if img_a.shape().n() != 1 {
        return Err(Error::InvalidArgument(format!("expected a single pair, got batch {}", img_a.shape())));
    }
    let mut g = Graph::new();
    let a = g.constant(img_a.clone());
    let b = g.constant(img_b.clone());
    let pyr = model.arch.encoder.backbone_pair(&mut g, &model.params, a, b)?;
    let mut levels = Vec::with_capacity(pyr.a.len());
    for (k, (&fa, &fb)) in pyr.a.iter().zip(&pyr.b).enumerate() {
        let phi_c = channel_similarity_map(&mut g, fa, fb)?;
        let phi_s = spatial_similarity_vector(&mut g, fa, fb)?;
        levels.push(LevelSimilarity {
            level: k + 1,
            phi_c: g.value(phi_c).clone(),
            phi_s: g.value(phi_s).data().to_vec(),
        });
    }
    Ok(SimilarityReport { levels, rgb_cosine: rgb_cosine(img_a, img_b)? })
}

/// Grayscale encoding of a cosine map, `-1 → 0` and `1 → 255`.
pub fn cosine_to_gray(map: &Tensor<f32>) -> Result<GrayImage> {
    let [n, c, h, w] = map.shape().0;
    if n != 1 || c != 1 {
        return Err(Error::InvalidArgument(format!("expected a (1, 1, H, W) map, got {}", map.shape())));
    }
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map.at(0, 0, y as usize, x as usize).clamp(-1.0, 1.0);
        Luma([((v + 1.0) * 127.5).round() as u8])
    }))
}

pub fn gray_to_cosine(level: u8) -> f32 {
    level as f32 / 127.5 - 1.0
}

pub fn phi_s_csv(phi_s: &[f32]) -> String {
    let mut out = String::from("channel,phi_s\n");
    for (i, v) in phi_s.iter().enumerate() {
        writeln!(out, "{i},{v:.6}").unwrap();
    }
    out
}

/// Writes `level{k}_phic.png`, `level{k}_phis.csv` and `rgb_cosine.txt` into `dir`.
pub fn write_report(report: &SimilarityReport, dir: &Path) -> Result<()> {
    for l in &report.levels {
        save_png(&cosine_to_gray(&l.phi_c)?.into(), &dir.join(format!("level{}_phic.png", l.level)))?;
        let path = dir.join(format!("level{}_phis.csv", l.level));
        std::fs::write(&path, phi_s_csv(&l.phi_s)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("rgb_cosine.txt");
    std::fs::write(&path, format!("{:.6}\n", report.rgb_cosine)).map_err(|e| Error::io(&path, e))
}
