//! Mask prediction sources and the low-coverage fallback controller.
//!
//! When a predicted mask covers less than 5% of the image, the latent is
//! re-processed once (CLAHE + NLM + equal blend) and re-predicted; the new
//! mask is kept only if its white count increased.

use super::net::{forward, ToyNet, DOWNSAMPLE_FACTOR};
use super::tensor::Tensor4;
use crate::gabor::{make_groundtruth, GroundtruthConfig};
use crate::imagecore::{white_ratio, BinaryMask, GrayImage};
use crate::preenhance::fallback_preprocess;
use crate::Result;

/// Coverage below which the predictor is given a second, re-processed try.
pub const FALLBACK_WHITE_RATIO: f64 = 0.05;

/// A source of ridge masks for a latent image.
pub trait MaskPredictor: Sync {
    fn predict(&self, latent: &GrayImage) -> Result<BinaryMask>;
}

/// Returns a pre-loaded mask verbatim, ignoring the input image.
pub struct FileMaskSource(pub BinaryMask);

impl MaskPredictor for FileMaskSource {
    fn predict(&self, _latent: &GrayImage) -> Result<BinaryMask> {
        Ok(self.0.clone())
    }
}

/// Runs the oriented-Gabor ground-truth pipeline as the predictor.
pub struct GaborMaskSource(pub GroundtruthConfig);

impl MaskPredictor for GaborMaskSource {
    fn predict(&self, latent: &GrayImage) -> Result<BinaryMask> {
        make_groundtruth(latent, &self.0)
    }
}

/// Runs the trained toy network; inputs are edge-padded up to the nearest
/// multiple of the network's downsampling factor, and the output is cropped
/// back.
pub struct ModelMaskSource(pub ToyNet);

impl MaskPredictor for ModelMaskSource {
    fn predict(&self, latent: &GrayImage) -> Result<BinaryMask> {
        let (w, h) = (latent.width(), latent.height());
        let pw = w.div_ceil(DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR;
        let ph = h.div_ceil(DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR;
        let mut x = Tensor4::zeros(1, 1, ph, pw);
        for y in 0..ph {
            for xx in 0..pw {
                x.plane_mut(0, 0)[y * pw + xx] =
                    latent.get(xx.min(w - 1), y.min(h - 1)) as f32;
            }
        }
        let cache = forward(&self.0, &x)?;
        let p0 = cache.probs.plane(0, 0);
        let p1 = cache.probs.plane(0, 1);
        let mut mask = BinaryMask::zeros(w, h);
        for y in 0..h {
            for xx in 0..w {
                if p1[y * pw + xx] > p0[y * pw + xx] {
                    mask.set(xx, y, 1);
                }
            }
        }
        Ok(mask)
    }
}

/// Predicts a ridge mask at the latent's resolution.
pub fn predict_mask(latent: &GrayImage, predictor: &dyn MaskPredictor) -> Result<BinaryMask> {
    predictor.predict(latent)
}

/// Outcome of the fallback controller.
#[derive(Debug, Clone)]
pub struct FallbackOutcome {
    pub mask: BinaryMask,
    /// White ratio of the returned mask.
    pub white_ratio: f64,
    /// Whether the low-coverage retry ran.
    pub fallback_attempted: bool,
    /// Whether the retry's mask was kept.
    pub fallback_used: bool,
    pub predictor_calls: usize,
}

/// Predicts a mask with at most one low-coverage retry: if the first mask
/// covers < 5% of the pixels, the latent is re-processed and re-predicted;
/// the second mask wins only if it has strictly more white pixels.
pub fn predict_with_fallback(
    latent: &GrayImage,
    predictor: &dyn MaskPredictor,
) -> Result<FallbackOutcome> {
    let first = predictor.predict(latent)?;
    if white_ratio(&first) >= FALLBACK_WHITE_RATIO {
        let ratio = white_ratio(&first);
        return Ok(FallbackOutcome {
            mask: first,
            white_ratio: ratio,
            fallback_attempted: false,
            fallback_used: false,
            predictor_calls: 1,
        });
    }
    let reprocessed = fallback_preprocess(latent)?;
    let second = predictor.predict(&reprocessed)?;
    let use_second = second.count_ones() > first.count_ones();
    let mask = if use_second { second } else { first };
    let ratio = white_ratio(&mask);
    Ok(FallbackOutcome {
        mask,
        white_ratio: ratio,
        fallback_attempted: true,
        fallback_used: use_second,
        predictor_calls: 2,
    })
}
