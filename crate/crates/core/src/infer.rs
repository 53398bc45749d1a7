//! Whole-image and sliding-window prediction.

use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::model::Model;
use crate::tensor::{Shape, Tensor};

/// Anything that maps an image pair `(1, 3, p, p)` to class probabilities `(1, 2, p, p)`.
pub trait PatchPredictor {
    fn predict_probs(&self, img_a: &Tensor<f32>, img_b: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl PatchPredictor for Model<f32> {
    fn predict_probs(&self, img_a: &Tensor<f32>, img_b: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.probabilities(img_a, img_b)
    }
}

/// Change wherever the change probability strictly exceeds the background probability.
pub fn argmax_mask(probs: &Tensor<f32>) -> Result<BinaryMask> {
    let [n, c, h, w] = probs.shape().0;
    if n != 1 || c != 2 {
        return Err(Error::InvalidArgument(format!("expected (1, 2, H, W) probabilities, got {}", probs.shape())));
    }
    let (bg, fg) = probs.data().split_at(h * w);
    BinaryMask::new(h, w, bg.iter().zip(fg).map(|(b, f)| (f > b) as u8).collect())
}

/// Tile origins along one axis: multiples of `stride`, with the last tile flush to the far edge.
pub fn tile_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(stride > 0 && patch > 0 && patch <= len, "tile_origins({len}, {patch}, {stride})");
    let last = len - patch;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

fn check_pair(img_a: &Tensor<f32>, img_b: &Tensor<f32>) -> Result<(usize, usize)> {
    let s = img_a.shape();
    if s != img_b.shape() {
        return Err(Error::ShapeMismatch { op: "slide_infer", left: s, right: img_b.shape() });
    }
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::InvalidArgument(format!("expected (1, 3, H, W) images, got {s}")));
    }
    Ok((s.h(), s.w()))
}

/// Averaged class probabilities over overlapping `patch × patch` tiles.
pub fn slide_probs<P: PatchPredictor + ?Sized>(
    predictor: &P,
    img_a: &Tensor<f32>,
    img_b: &Tensor<f32>,
    patch: usize,
    stride: usize,
) -> Result<Tensor<f32>> {
    if patch == 0 || !patch.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Indivisible { size: patch, multiple: INPUT_MULTIPLE });
    }
    if stride == 0 || stride > patch {
        return Err(Error::InvalidArgument(format!("stride {stride} must be in 1..={patch}")));
    }
    let (h, w) = check_pair(img_a, img_b)?;
    if h < patch || w < patch {
        return Err(Error::ImageSmallerThanPatch { image_h: h, image_w: w, patch });
    }
    let plane = h * w;
    let mut sum = vec![0f32; 2 * plane];
    let mut count = vec![0u32; plane];
    for &y0 in &tile_origins(h, patch, stride) {
        for &x0 in &tile_origins(w, patch, stride) {
            let pa = img_a.crop(y0, x0, patch, patch)?;
            let pb = img_b.crop(y0, x0, patch, patch)?;
            let probs = predictor.predict_probs(&pa, &pb)?;
            if probs.shape() != Shape::new(1, 2, patch, patch) {
                return Err(Error::InvalidShape(format!("predictor returned {} for a {patch} tile", probs.shape())));
            }
            let p = probs.data();
            for y in 0..patch {
                for x in 0..patch {
                    let dst = (y0 + y) * w + x0 + x;
                    let src = y * patch + x;
                    sum[dst] += p[src];
                    sum[plane + dst] += p[patch * patch + src];
                    count[dst] += 1;
                }
            }
        }
    }
    for (i, v) in sum.iter_mut().enumerate() {
        *v /= count[i % plane] as f32;
    }
    Tensor::new(Shape::new(1, 2, h, w), sum)
}

pub fn slide_infer<P: PatchPredictor + ?Sized>(
    predictor: &P,
    img_a: &Tensor<f32>,
    img_b: &Tensor<f32>,
    patch: usize,
    stride: usize,
) -> Result<BinaryMask> {
    argmax_mask(&slide_probs(predictor, img_a, img_b, patch, stride)?)
}

/// Single forward pass when the image fits in one patch, sliding window otherwise.
pub fn predict_mask<P: PatchPredictor + ?Sized>(
    predictor: &P,
    img_a: &Tensor<f32>,
    img_b: &Tensor<f32>,
    patch: usize,
    stride: usize,
) -> Result<BinaryMask> {
    let (h, w) = check_pair(img_a, img_b)?;
    if h <= patch && w <= patch {
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::Indivisible { size: h.max(w), multiple: INPUT_MULTIPLE });
        }
        return argmax_mask(&predictor.predict_probs(img_a, img_b)?);
    }
    slide_infer(predictor, img_a, img_b, patch, stride)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Change probability equals the mean of image A at each pixel.
    struct MeanA;

    impl PatchPredictor for MeanA {
        fn predict_probs(&self, a: &Tensor<f32>, _b: &Tensor<f32>) -> Result<Tensor<f32>> {
            let [_, _, h, w] = a.shape().0;
            Ok(Tensor::from_fn(Shape::new(1, 2, h, w), |[_, c, y, x]| {
                let m = (a.at(0, 0, y, x) + a.at(0, 1, y, x) + a.at(0, 2, y, x)) / 3.0;
                if c == 1 {
                    m
                } else {
                    1.0 - m
                }
            }))
        }
    }

    #[test]
    fn origins_cover_the_far_edge() {
        assert_eq!(tile_origins(64, 64, 32), [0]);
        assert_eq!(tile_origins(96, 64, 32), [0, 32]);
        assert_eq!(tile_origins(100, 64, 32), [0, 32, 36]);
        assert_eq!(tile_origins(128, 64, 64), [0, 64]);
    }

    #[test]
    fn pixelwise_predictor_is_stride_invariant() {
        let a = Tensor::from_fn(Shape::new(1, 3, 80, 72), |[_, c, y, x]| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        let reference = slide_infer(&MeanA, &a, &a, 64, 64).unwrap();
        for stride in [1, 8, 13, 32] {
            assert_eq!(slide_infer(&MeanA, &a, &a, 64, stride).unwrap(), reference);
        }
    }

    #[test]
    fn argument_errors() {
        let a = Tensor::zeros(Shape::new(1, 3, 32, 48));
        assert!(matches!(slide_infer(&MeanA, &a, &a, 64, 32), Err(Error::ImageSmallerThanPatch { .. })));
        assert!(matches!(slide_infer(&MeanA, &a, &a, 48, 16), Err(Error::Indivisible { .. })));
        assert!(slide_infer(&MeanA, &a, &a, 32, 33).is_err());
        let b = Tensor::zeros(Shape::new(1, 3, 32, 32));
        assert!(slide_infer(&MeanA, &a, &b, 32, 16).is_err());
    }
}
