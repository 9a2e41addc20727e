//! Pre-enhancement and fallback re-processing stacks: CLAHE, fast non-local
//! means denoising, adaptive thresholding, and contrast boosting.
//!
//! `pre_enhance` runs CLAHE -> NLM -> blend of the (inverted) adaptive
//! threshold map, which lowers ridge intensity while lifting the background.
//! `fallback_preprocess` is the fixed low-coverage recovery stack:
//! CLAHE -> NLM(h=5, 3x3 patch, 7x7 search) -> equal-weight blend with the
//! original.

use serde::{Deserialize, Serialize};

use crate::guided::box_mean;
use crate::imagecore::{blend_weighted, GrayImage};
use crate::{Error, Result};

/// Contrast-limited adaptive histogram equalization parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheParams {
    /// Histogram clip limit as a multiple of the uniform bin height.
    pub clip_limit: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tiles_x: 8,
            tiles_y: 8,
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<()> {
        if self.clip_limit.is_nan() || self.clip_limit <= 0.0 {
            return Err(Error::InvalidParam("clahe clip_limit must be > 0".into()));
        }
        if self.tiles_x < 1 || self.tiles_y < 1 {
            return Err(Error::InvalidParam("clahe tile counts must be >= 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidParam("clahe bins must be >= 2".into()));
        }
        Ok(())
    }
}

/// Non-local means parameters. `h` is on the 8-bit scale (a strength of 5
/// means 5/255 in `[0, 1]` intensities).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlMeansParams {
    pub h: f64,
    /// Odd patch side, e.g. 3 for a 3x3 template.
    pub template: usize,
    /// Odd search window side, e.g. 7 for a 7x7 window.
    pub search: usize,
}

impl Default for NlMeansParams {
    fn default() -> Self {
        Self {
            h: 5.0,
            template: 3,
            search: 7,
        }
    }
}

impl NlMeansParams {
    pub fn validate(&self) -> Result<()> {
        if self.h.is_nan() || self.h <= 0.0 {
            return Err(Error::InvalidParam("nl_means h must be > 0".into()));
        }
        if self.template.is_multiple_of(2) || self.search.is_multiple_of(2) {
            return Err(Error::InvalidParam(
                "nl_means template and search sides must be odd".into(),
            ));
        }
        if self.search < self.template {
            return Err(Error::InvalidParam(
                "nl_means search window must be at least the template size".into(),
            ));
        }
        Ok(())
    }
}

/// Mean-offset adaptive threshold parameters (`c` on the `[0, 1]` scale).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveThreshParams {
    /// Odd neighborhood side.
    pub block: usize,
    /// Offset subtracted from the local mean.
    pub c: f64,
}

impl Default for AdaptiveThreshParams {
    fn default() -> Self {
        Self { block: 15, c: 0.02 }
    }
}

impl AdaptiveThreshParams {
    pub fn validate(&self) -> Result<()> {
        if self.block.is_multiple_of(2) || self.block < 3 {
            return Err(Error::InvalidParam(
                "adaptive threshold block must be odd and >= 3".into(),
            ));
        }
        Ok(())
    }
}

/// Full pre-enhancement configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreEnhanceConfig {
    pub clahe: ClaheParams,
    pub nl_means: NlMeansParams,
    pub threshold: AdaptiveThreshParams,
}

impl PreEnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.clahe.validate()?;
        self.nl_means.validate()?;
        self.threshold.validate()
    }
}

/// Per-tile intensity mapping. A tile whose histogram occupies a single bin
/// has no contrast to equalize and maps identically.
enum TileMap {
    Identity,
    Lut(Vec<f64>),
}

impl TileMap {
    #[inline]
    fn apply(&self, v: f64, bins: usize) -> f64 {
        match self {
            TileMap::Identity => v,
            TileMap::Lut(lut) => lut[bin_of(v, bins)],
        }
    }
}

#[inline]
fn bin_of(v: f64, bins: usize) -> usize {
    ((v * (bins - 1) as f64).round() as usize).min(bins - 1)
}

fn tile_map(hist: &[f64], area: f64, clip_limit: f64) -> TileMap {
    let bins = hist.len();
    if hist.iter().filter(|&&c| c > 0.0).count() <= 1 {
        return TileMap::Identity;
    }
    // Clip each bin at clip_limit times the uniform height and hand the
    // excess back uniformly, then map through the scaled CDF.
    let clip = (clip_limit * area / bins as f64).max(1.0);
    let mut excess = 0.0;
    let mut clipped: Vec<f64> = hist
        .iter()
        .map(|&c| {
            if c > clip {
                excess += c - clip;
                clip
            } else {
                c
            }
        })
        .collect();
    let share = excess / bins as f64;
    for c in clipped.iter_mut() {
        *c += share;
    }
    let mut lut = Vec::with_capacity(bins);
    let mut cdf = 0.0;
    for &c in &clipped {
        cdf += c;
        lut.push((cdf / area).clamp(0.0, 1.0));
    }
    TileMap::Lut(lut)
}

/// Contrast-limited adaptive histogram equalization with bilinear
/// interpolation between the per-tile mappings.
pub fn clahe(img: &GrayImage, p: &ClaheParams) -> Result<GrayImage> {
    p.validate()?;
    let (w, h) = (img.width(), img.height());
    let (tx, ty) = (p.tiles_x, p.tiles_y);
    if w < tx || h < ty {
        return Err(Error::ImageTooSmall(format!(
            "{w}x{h} image cannot host a {tx}x{ty} tile grid"
        )));
    }
    let tile_w = w as f64 / tx as f64;
    let tile_h = h as f64 / ty as f64;

    // Histogram per tile; tile boundaries round to pixel indices.
    let mut maps = Vec::with_capacity(tx * ty);
    for tj in 0..ty {
        let y0 = (tj as f64 * tile_h).round() as usize;
        let y1 = (((tj + 1) as f64 * tile_h).round() as usize).min(h).max(y0 + 1);
        for ti in 0..tx {
            let x0 = (ti as f64 * tile_w).round() as usize;
            let x1 = (((ti + 1) as f64 * tile_w).round() as usize).min(w).max(x0 + 1);
            let mut hist = vec![0.0f64; p.bins];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(img.get(x, y), p.bins)] += 1.0;
                }
            }
            let area = ((x1 - x0) * (y1 - y0)) as f64;
            maps.push(tile_map(&hist, area, p.clip_limit));
        }
    }

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = (y as f64 + 0.5) / tile_h - 0.5;
        let j0 = (fy.floor().max(0.0) as usize).min(ty - 1);
        let j1 = (j0 + 1).min(ty - 1);
        let wy = if fy < 0.0 { 0.0 } else { (fy - fy.floor()).clamp(0.0, 1.0) };
        for x in 0..w {
            let fx = (x as f64 + 0.5) / tile_w - 0.5;
            let i0 = (fx.floor().max(0.0) as usize).min(tx - 1);
            let i1 = (i0 + 1).min(tx - 1);
            let wx = if fx < 0.0 { 0.0 } else { (fx - fx.floor()).clamp(0.0, 1.0) };

            let v = img.get(x, y);
            let tl = maps[j0 * tx + i0].apply(v, p.bins);
            let tr = maps[j0 * tx + i1].apply(v, p.bins);
            let bl = maps[j1 * tx + i0].apply(v, p.bins);
            let br = maps[j1 * tx + i1].apply(v, p.bins);
            let mapped = if tl == tr && tl == bl && tl == br {
                tl
            } else {
                let top = (1.0 - wx) * tl + wx * tr;
                let bottom = (1.0 - wx) * bl + wx * br;
                (1.0 - wy) * top + wy * bottom
            };
            out.push(mapped.clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage::from_raw(w, h, out))
}

/// Fast non-local means: one shifted squared-difference plane per search
/// offset, patch means via integral-image box filtering, Gaussian weights
/// `exp(-d^2 / h^2)`. Cost is O(N * search^2), independent of template size.
pub fn nl_means(img: &GrayImage, p: &NlMeansParams) -> Result<GrayImage> {
    p.validate()?;
    let (w, h) = (img.width(), img.height());
    if w <= p.search || h <= p.search {
        return Err(Error::ImageTooSmall(format!(
            "{w}x{h} image not larger than the {0}x{0} search window",
            p.search
        )));
    }
    let sr = (p.search / 2) as i64;
    let tr = p.template / 2;
    let h01 = p.h / 255.0;
    let inv_h2 = 1.0 / (h01 * h01);
    let n = w * h;
    let src = img.data();

    let mut weighted = vec![0.0f64; n];
    let mut wsum = vec![0.0f64; n];
    let mut diff2 = vec![0.0f64; n];
    let mut shifted = vec![0.0f64; n];

    for dy in -sr..=sr {
        for dx in -sr..=sr {
            for y in 0..h {
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for x in 0..w {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let sv = src[sy * w + sx];
                    shifted[y * w + x] = sv;
                    let d = src[y * w + x] - sv;
                    diff2[y * w + x] = d * d;
                }
            }
            let d2 = box_mean(&diff2, w, h, tr.max(1));
            for k in 0..n {
                let wgt = (-d2[k] * inv_h2).exp();
                weighted[k] += wgt * shifted[k];
                wsum[k] += wgt;
            }
        }
    }

    let out: Vec<f64> = (0..n)
        .map(|k| {
            debug_assert!(wsum[k].is_finite() && wsum[k] >= 1.0);
            (weighted[k] / wsum[k]).clamp(0.0, 1.0)
        })
        .collect();
    Ok(GrayImage::from_raw(w, h, out))
}

/// Mean-offset threshold: 1 where the pixel sits below `local mean - c`
/// (dark ridges become 1), 0 elsewhere. Returned as a `{0, 1}` grayscale
/// plane for downstream blending.
pub fn adaptive_threshold(img: &GrayImage, p: &AdaptiveThreshParams) -> Result<GrayImage> {
    p.validate()?;
    let (w, h) = (img.width(), img.height());
    if p.block >= w.min(h) {
        return Err(Error::ImageTooSmall(format!(
            "block {} must be smaller than min dimension {}",
            p.block,
            w.min(h)
        )));
    }
    let means = box_mean(img.data(), w, h, p.block / 2);
    let out: Vec<f64> = img
        .data()
        .iter()
        .zip(&means)
        .map(|(&v, &m)| if v > m - p.c { 0.0 } else { 1.0 })
        .collect();
    Ok(GrayImage::from_raw(w, h, out))
}

/// Pre-enhancement stack: CLAHE -> NLM -> equal-weight blend of the inverted
/// threshold map, which darkens ridge pixels and lifts the background.
pub fn pre_enhance(img: &GrayImage, cfg: &PreEnhanceConfig) -> Result<GrayImage> {
    cfg.validate()?;
    let equalized = clahe(img, &cfg.clahe)?;
    let denoised = nl_means(&equalized, &cfg.nl_means)?;
    let ridges_white = adaptive_threshold(&denoised, &cfg.threshold)?;
    // The threshold map carries ridges as 1; blending its complement keeps
    // ridges dark in the grayscale result.
    blend_weighted(&denoised, &ridges_white.invert(), 0.5, 0.5)
}

/// Low-coverage fallback stack with fixed parameters: CLAHE, NLM with
/// strength 5, 3x3 patches and a 7x7 search window, then an equal-weight
/// blend with the original.
pub fn fallback_preprocess(img: &GrayImage) -> Result<GrayImage> {
    let equalized = clahe(img, &ClaheParams::default())?;
    let denoised = nl_means(
        &equalized,
        &NlMeansParams {
            h: 5.0,
            template: 3,
            search: 7,
        },
    )?;
    blend_weighted(img, &denoised, 0.5, 0.5)
}

/// Linear contrast stretch around the global mean, clamped to `[0, 1]`.
pub fn contrast_boost(img: &GrayImage, factor: f64) -> GrayImage {
    let mean = img.mean();
    GrayImage::from_raw(
        img.width(),
        img.height(),
        img.data()
            .iter()
            .map(|&v| (mean + factor * (v - mean)).clamp(0.0, 1.0))
            .collect(),
    )
}
