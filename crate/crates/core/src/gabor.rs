//! Ridge orientation/frequency estimation and oriented Gabor enhancement.
//!
//! This stage turns a raw latent into a binary ridge mask: three enhancement
//! variants (original, pre-enhanced, contrast-boosted pre-enhanced) are each
//! filtered with per-block oriented Gabor kernels, fused, binarized against
//! the local mean, and intersected with a reliability mask that drops
//! low-coherence or frequency-invalid blocks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::guided::box_mean;
use crate::imagecore::{BinaryMask, GrayImage};
use crate::preenhance::{contrast_boost, pre_enhance, PreEnhanceConfig};
use crate::{Error, Result};

const PI: f64 = std::f64::consts::PI;

/// Block-wise ridge orientation estimate.
#[derive(Debug, Clone)]
pub struct OrientationField {
    /// Block side in pixels.
    pub block: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Ridge direction per block, radians in `[0, pi)`.
    pub angles: Vec<f64>,
    /// Reliability per block in `[0, 1]`.
    pub coherence: Vec<f64>,
}

impl OrientationField {
    #[inline]
    pub fn angle_at(&self, bx: usize, by: usize) -> f64 {
        self.angles[by * self.grid_w + bx]
    }

    #[inline]
    pub fn coherence_at(&self, bx: usize, by: usize) -> f64 {
        self.coherence[by * self.grid_w + bx]
    }
}

/// Block-wise ridge frequency estimate in cycles/pixel; `None` marks blocks
/// where no plausible ridge spacing was found.
#[derive(Debug, Clone)]
pub struct FrequencyField {
    pub block: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub freqs: Vec<Option<f64>>,
    /// Peak-to-valley swing of each block's smoothed signature; distinguishes
    /// featureless blocks from textured blocks whose spacing was unreadable.
    pub swings: Vec<f64>,
}

impl FrequencyField {
    #[inline]
    pub fn freq_at(&self, bx: usize, by: usize) -> Option<f64> {
        self.freqs[by * self.grid_w + bx]
    }
}

/// Gabor kernel envelope and support.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaborParams {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub kernel_radius: usize,
}

impl Default for GaborParams {
    fn default() -> Self {
        Self {
            sigma_x: 4.0,
            sigma_y: 4.0,
            kernel_radius: 11,
        }
    }
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_x.is_nan() || self.sigma_x <= 0.0 || self.sigma_y.is_nan() || self.sigma_y <= 0.0 {
            return Err(Error::InvalidParam("gabor sigmas must be > 0".into()));
        }
        if (self.kernel_radius as f64) < 2.0 * self.sigma_x.max(self.sigma_y) {
            return Err(Error::InvalidParam(
                "gabor kernel_radius must be >= 2*max(sigma)".into(),
            ));
        }
        Ok(())
    }
}

/// How the three enhanced variants are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    /// Per-pixel minimum: the darkest variant wins.
    Min,
    /// Per-pixel average.
    Mean,
}

/// Parameters of the ground-truth extraction stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaborConfig {
    pub block: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub kernel_radius: usize,
    pub min_coherence: f64,
    pub contrast_boost: f64,
    pub fuse: FuseMode,
}

impl Default for GaborConfig {
    fn default() -> Self {
        Self {
            block: 16,
            sigma_x: 4.0,
            sigma_y: 4.0,
            kernel_radius: 11,
            min_coherence: 0.3,
            contrast_boost: 1.5,
            fuse: FuseMode::Min,
        }
    }
}

impl GaborConfig {
    pub fn params(&self) -> GaborParams {
        GaborParams {
            sigma_x: self.sigma_x,
            sigma_y: self.sigma_y,
            kernel_radius: self.kernel_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block < 4 {
            return Err(Error::InvalidParam("gabor block must be >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.min_coherence) {
            return Err(Error::InvalidParam("min_coherence must be in [0, 1]".into()));
        }
        if self.contrast_boost.is_nan() || self.contrast_boost <= 0.0 {
            return Err(Error::InvalidParam("contrast_boost must be > 0".into()));
        }
        self.params().validate()
    }
}

/// Ground-truth pipeline configuration: pre-enhancement plus Gabor stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundtruthConfig {
    pub pre: PreEnhanceConfig,
    pub gabor: GaborConfig,
}

fn grid_dims(w: usize, h: usize, block: usize) -> (usize, usize) {
    (w.div_ceil(block), h.div_ceil(block))
}

fn check_field_dims(img: &GrayImage, block: usize, grid_w: usize, grid_h: usize) -> Result<()> {
    let (gw, gh) = grid_dims(img.width(), img.height(), block);
    if (gw, gh) != (grid_w, grid_h) {
        return Err(Error::DimensionMismatch {
            expected_w: gw,
            expected_h: gh,
            got_w: grid_w,
            got_h: grid_h,
        });
    }
    Ok(())
}

/// Sobel gradient planes, edge-replicated borders.
fn sobel(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = |dx: i64, dy: i64| img.get_clamped(x + dx, y + dy);
            let sx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let sy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gx[(y * w as i64 + x) as usize] = sx;
            gy[(y * w as i64 + x) as usize] = sy;
        }
    }
    (gx, gy)
}

/// Block-wise ridge orientation via averaged doubled-angle gradients:
/// `theta = atan2(sum 2*gx*gy, sum gx^2 - gy^2) / 2 + pi/2`, with coherence
/// `|vector sum| / scalar sum`.
pub fn orientation_field(img: &GrayImage, block: usize) -> Result<OrientationField> {
    if block < 4 {
        return Err(Error::InvalidParam("orientation block must be >= 4".into()));
    }
    let (w, h) = (img.width(), img.height());
    if w < 2 * block || h < 2 * block {
        return Err(Error::ImageTooSmall(format!(
            "{w}x{h} image needs at least two {block}-px blocks per side"
        )));
    }
    let (gx, gy) = sobel(img);
    let (grid_w, grid_h) = grid_dims(w, h, block);
    let mut angles = Vec::with_capacity(grid_w * grid_h);
    let mut coherence = Vec::with_capacity(grid_w * grid_h);
    for by in 0..grid_h {
        for bx in 0..grid_w {
            let (mut vx, mut vy, mut scalar) = (0.0, 0.0, 0.0);
            for y in (by * block)..((by + 1) * block).min(h) {
                for x in (bx * block)..((bx + 1) * block).min(w) {
                    let (a, b) = (gx[y * w + x], gy[y * w + x]);
                    vx += 2.0 * a * b;
                    vy += a * a - b * b;
                    scalar += a * a + b * b;
                }
            }
            let mut theta = (0.5 * vx.atan2(vy) + PI / 2.0).rem_euclid(PI);
            if theta >= PI {
                theta -= PI;
            }
            angles.push(theta);
            coherence.push(if scalar < 1e-12 {
                0.0
            } else {
                (vx * vx + vy * vy).sqrt() / scalar
            });
        }
    }
    Ok(OrientationField {
        block,
        grid_w,
        grid_h,
        angles,
        coherence,
    })
}

fn bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let v00 = img.get_clamped(x0, y0);
    let v10 = img.get_clamped(x0 + 1, y0);
    let v01 = img.get_clamped(x0, y0 + 1);
    let v11 = img.get_clamped(x0 + 1, y0 + 1);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}

/// Signature window: samples along the ridge-perpendicular direction,
/// averaged along the ridge direction. The length covers two full cycles of
/// the largest valid period so that three peaks fit.
const SIG_LEN: usize = 56;
const SIG_WIDTH: usize = 16;

/// Valid ridge period range in pixels.
const MIN_PERIOD: f64 = 3.0;
const MAX_PERIOD: f64 = 25.0;

/// Minimum peak-to-valley swing of the smoothed signature; flatter blocks
/// carry no usable oscillation.
const MIN_SWING: f64 = 0.05;

/// Individual peak spacings may deviate from their mean by at most this
/// factor; isolated strokes and noise fail this periodicity check.
const SPACING_TOLERANCE: f64 = 0.35;

/// Block-wise ridge frequency from the mean peak spacing of the oriented
/// intensity signature; blocks without a plausible spacing come back `None`.
pub fn ridge_frequency(img: &GrayImage, of: &OrientationField) -> Result<FrequencyField> {
    check_field_dims(img, of.block, of.grid_w, of.grid_h)?;
    let block = of.block;
    let mut freqs = Vec::with_capacity(of.grid_w * of.grid_h);
    let mut swings = Vec::with_capacity(of.grid_w * of.grid_h);
    for by in 0..of.grid_h {
        for bx in 0..of.grid_w {
            let theta = of.angle_at(bx, by);
            let phi = theta + PI / 2.0; // oscillation direction
            let (uc, us) = (phi.cos(), phi.sin());
            let (vc, vs) = (theta.cos(), theta.sin());
            let cx = (bx * block) as f64 + block as f64 / 2.0;
            let cy = (by * block) as f64 + block as f64 / 2.0;

            let mut sig = [0.0f64; SIG_LEN];
            for (k, s) in sig.iter_mut().enumerate() {
                let ku = k as f64 - SIG_LEN as f64 / 2.0 + 0.5;
                let mut acc = 0.0;
                for d in 0..SIG_WIDTH {
                    let kv = d as f64 - SIG_WIDTH as f64 / 2.0 + 0.5;
                    acc += bilinear(img, cx + ku * uc + kv * vc, cy + ku * us + kv * vs);
                }
                *s = acc / SIG_WIDTH as f64;
            }
            // 3-tap smoothing before peak picking.
            let mut smooth = [0.0f64; SIG_LEN];
            smooth[0] = sig[0];
            smooth[SIG_LEN - 1] = sig[SIG_LEN - 1];
            for k in 1..SIG_LEN - 1 {
                smooth[k] = 0.25 * sig[k - 1] + 0.5 * sig[k] + 0.25 * sig[k + 1];
            }

            let swing = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - smooth.iter().cloned().fold(f64::INFINITY, f64::min);
            swings.push(swing);
            let mut peaks: Vec<f64> = Vec::new();
            if swing >= MIN_SWING {
                for k in 1..SIG_LEN - 1 {
                    if smooth[k] > smooth[k - 1] && smooth[k] >= smooth[k + 1] {
                        let denom = smooth[k - 1] - 2.0 * smooth[k] + smooth[k + 1];
                        let delta = if denom.abs() > 1e-12 {
                            (0.5 * (smooth[k - 1] - smooth[k + 1]) / denom).clamp(-0.5, 0.5)
                        } else {
                            0.0
                        };
                        peaks.push(k as f64 + delta);
                    }
                }
            }
            freqs.push(peak_spacing(&peaks).map(|s| 1.0 / s));
        }
    }
    Ok(FrequencyField {
        block,
        grid_w: of.grid_w,
        grid_h: of.grid_h,
        freqs,
        swings,
    })
}

/// Mean spacing of detected peaks, or `None` unless at least three peaks
/// repeat at a consistent interval inside the valid period range.
fn peak_spacing(peaks: &[f64]) -> Option<f64> {
    if peaks.len() < 3 {
        return None;
    }
    let mean = (peaks[peaks.len() - 1] - peaks[0]) / (peaks.len() - 1) as f64;
    if !(MIN_PERIOD..=MAX_PERIOD).contains(&mean) {
        return None;
    }
    let consistent = peaks
        .windows(2)
        .all(|w| ((w[1] - w[0]) - mean).abs() <= SPACING_TOLERANCE * mean);
    consistent.then_some(mean)
}

/// Fills frequency holes from valid neighbors: an invalid block whose
/// orientation is coherent (oriented texture present, measurement failed)
/// adopts the median frequency of its valid 8-neighbors. Incoherent blocks
/// stay invalid so featureless regions are never painted.
pub fn repair_frequency(
    of: &OrientationField,
    ff: &FrequencyField,
    min_coherence: f64,
    passes: usize,
) -> FrequencyField {
    let (gw, gh) = (ff.grid_w, ff.grid_h);
    let mut freqs = ff.freqs.clone();
    for _ in 0..passes {
        let snapshot = freqs.clone();
        for by in 0..gh {
            for bx in 0..gw {
                let k = by * gw + bx;
                if snapshot[k].is_some()
                    || of.coherence[k] < min_coherence
                    || ff.swings[k] < MIN_SWING
                {
                    continue;
                }
                let mut vals: Vec<f64> = Vec::new();
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (bx as i64 + dx, by as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= gw as i64 || ny >= gh as i64 {
                            continue;
                        }
                        if let Some(f) = snapshot[ny as usize * gw + nx as usize] {
                            vals.push(f);
                        }
                    }
                }
                if vals.len() >= 4 {
                    vals.sort_by(|a, b| a.total_cmp(b));
                    freqs[k] = Some(vals[vals.len() / 2]);
                }
            }
        }
    }
    FrequencyField {
        block: ff.block,
        grid_w: gw,
        grid_h: gh,
        freqs,
        swings: ff.swings.clone(),
    }
}

/// Even-symmetric Gabor kernel tuned to (theta, freq).
fn gabor_kernel(theta: f64, freq: f64, gp: &GaborParams) -> Vec<f64> {
    let r = gp.kernel_radius as i64;
    let side = (2 * r + 1) as usize;
    let phi = theta + PI / 2.0;
    let (c, s) = (phi.cos(), phi.sin());
    let mut k = Vec::with_capacity(side * side);
    for dy in -r..=r {
        for dx in -r..=r {
            let u = dx as f64 * c + dy as f64 * s;
            let v = -(dx as f64) * s + dy as f64 * c;
            let env = (-0.5 * ((u / gp.sigma_x).powi(2) + (v / gp.sigma_y).powi(2))).exp();
            k.push(env * (2.0 * PI * freq * u).cos());
        }
    }
    k
}

/// Filters each pixel with the Gabor kernel of its block; blocks without a
/// valid frequency pass through unchanged. Filtered pixels are renormalized
/// to `[0, 1]` among themselves; pass-through pixels keep their values.
pub fn gabor_enhance(
    img: &GrayImage,
    of: &OrientationField,
    ff: &FrequencyField,
    gp: &GaborParams,
) -> Result<GrayImage> {
    gp.validate()?;
    check_field_dims(img, of.block, of.grid_w, of.grid_h)?;
    check_field_dims(img, ff.block, ff.grid_w, ff.grid_h)?;
    let (w, h) = (img.width(), img.height());
    let block = of.block;
    let r = gp.kernel_radius as i64;

    let kernels: Vec<Option<Vec<f64>>> = (0..of.grid_w * of.grid_h)
        .map(|b| ff.freqs[b].map(|f| gabor_kernel(of.angles[b], f, gp)))
        .collect();

    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let by = y / block;
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let bx = x / block;
                match &kernels[by * of.grid_w + bx] {
                    None => row.push(f64::NAN), // pass-through marker
                    Some(kernel) => {
                        let mut acc = 0.0;
                        let mut ki = 0;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                acc += kernel[ki] * img.get_clamped(x as i64 + dx, y as i64 + dy);
                                ki += 1;
                            }
                        }
                        row.push(acc);
                    }
                }
            }
            row
        })
        .collect();

    let mut out = vec![0.0f64; w * h];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (y, row) in rows.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            out[y * w + x] = v;
            if !v.is_nan() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let span = hi - lo;
    for (k, v) in out.iter_mut().enumerate() {
        if v.is_nan() {
            *v = img.data()[k];
        } else if span > 1e-12 {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        } else {
            *v = img.data()[k];
        }
    }
    Ok(GrayImage::from_raw(w, h, out))
}

/// Fuses three enhanced variants. `Min` keeps the darkest response so ridges
/// lost by one variant survive from another; the result is renormalized to
/// `[0, 1]` unless it is flat.
pub fn fuse_enhanced(a: &GrayImage, b: &GrayImage, c: &GrayImage) -> Result<GrayImage> {
    fuse_with(a, b, c, FuseMode::Min)
}

pub fn fuse_with(a: &GrayImage, b: &GrayImage, c: &GrayImage, mode: FuseMode) -> Result<GrayImage> {
    if !a.same_dims(b) || !a.same_dims(c) {
        return Err(Error::DimensionMismatch {
            expected_w: a.width(),
            expected_h: a.height(),
            got_w: if a.same_dims(b) { c.width() } else { b.width() },
            got_h: if a.same_dims(b) { c.height() } else { b.height() },
        });
    }
    let mut fused: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| match mode {
            FuseMode::Min => x.min(y).min(z),
            FuseMode::Mean => (x + y + z) / 3.0,
        })
        .collect();
    let lo = fused.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = fused.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 1e-12 {
        for v in fused.iter_mut() {
            *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }
    Ok(GrayImage::from_raw(a.width(), a.height(), fused))
}

/// Thresholds the enhanced response against its local mean: 1 where the
/// pixel sits below the mean (dark ridge), 0 elsewhere and in invalid blocks.
///
/// The local mean is taken over valid-block pixels only, so bright invalid
/// surroundings cannot skew the threshold near region boundaries.
pub fn binarize(img: &GrayImage, of: &OrientationField, ff: &FrequencyField) -> Result<BinaryMask> {
    check_field_dims(img, of.block, of.grid_w, of.grid_h)?;
    check_field_dims(img, ff.block, ff.grid_w, ff.grid_h)?;
    let (w, h) = (img.width(), img.height());
    let r = (of.block / 2).max(1);
    let valid: Vec<f64> = (0..w * h)
        .map(|k| {
            let (bx, by) = ((k % w) / of.block, (k / w) / of.block);
            ff.freq_at(bx, by).is_some() as u8 as f64
        })
        .collect();
    let masked: Vec<f64> = img
        .data()
        .iter()
        .zip(&valid)
        .map(|(&v, &m)| v * m)
        .collect();
    let sum_v = box_mean(&masked, w, h, r);
    let sum_n = box_mean(&valid, w, h, r);
    let mut mask = BinaryMask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            if valid[k] == 1.0 && sum_n[k] > 0.0 && img.data()[k] < sum_v[k] / sum_n[k] {
                mask.set(x, y, 1);
            }
        }
    }
    Ok(mask)
}

/// Reliability mask at image resolution: 1 where the block is coherent and
/// has a valid frequency.
pub fn region_mask(
    of: &OrientationField,
    ff: &FrequencyField,
    min_coherence: f64,
) -> Result<BinaryMask> {
    if (of.grid_w, of.grid_h, of.block) != (ff.grid_w, ff.grid_h, ff.block) {
        return Err(Error::DimensionMismatch {
            expected_w: of.grid_w,
            expected_h: of.grid_h,
            got_w: ff.grid_w,
            got_h: ff.grid_h,
        });
    }
    // Nearest upsampling to the pixel extent of the grid.
    let w = of.grid_w * of.block;
    let h = of.grid_h * of.block;
    let mut mask = BinaryMask::zeros(w, h);
    for y in 0..h {
        let by = y / of.block;
        for x in 0..w {
            let bx = x / of.block;
            let ok = of.coherence_at(bx, by) >= min_coherence && ff.freq_at(bx, by).is_some();
            if ok {
                mask.set(x, y, 1);
            }
        }
    }
    Ok(mask)
}

/// Removes 8-connected components smaller than `min_size` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_size: usize) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = mask.clone();
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if out.data()[start] == 0 || seen[start] {
            continue;
        }
        stack.push(start);
        seen[start] = true;
        component.clear();
        while let Some(k) = stack.pop() {
            component.push(k);
            let (x, y) = (k % w, k / w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nk = ny as usize * w + nx as usize;
                    if !seen[nk] && out.data()[nk] == 1 {
                        seen[nk] = true;
                        stack.push(nk);
                    }
                }
            }
        }
        if component.len() < min_size {
            for &k in &component {
                out.data_mut()[k] = 0;
            }
        }
    }
    out
}

/// Full ground-truth extraction: three variants -> Gabor enhance each ->
/// fuse -> binarize -> AND with the reliability mask -> drop speckles.
pub fn make_groundtruth(img: &GrayImage, cfg: &GroundtruthConfig) -> Result<BinaryMask> {
    cfg.gabor.validate()?;
    let gp = cfg.gabor.params();
    let block = cfg.gabor.block;

    let pre = pre_enhance(img, &cfg.pre)?;
    let boosted = contrast_boost(&pre, cfg.gabor.contrast_boost);
    let variants = [img, &pre, &boosted];

    let mut enhanced = Vec::with_capacity(3);
    for v in variants {
        let of = orientation_field(v, block)?;
        let ff = ridge_frequency(v, &of)?;
        let ff = repair_frequency(&of, &ff, cfg.gabor.min_coherence, 2);
        enhanced.push(gabor_enhance(v, &of, &ff, &gp)?);
    }
    let fused = fuse_with(&enhanced[0], &enhanced[1], &enhanced[2], cfg.gabor.fuse)?;

    let of = orientation_field(&fused, block)?;
    let ff = ridge_frequency(&fused, &of)?;
    let ff = repair_frequency(&of, &ff, cfg.gabor.min_coherence, 2);
    let bin = binarize(&fused, &of, &ff)?;
    let region = region_mask(&of, &ff, cfg.gabor.min_coherence)?;

    let (w, h) = (img.width(), img.height());
    let mut mask = BinaryMask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            // The region mask extends to whole blocks; clip to image bounds.
            if bin.get(x, y) == 1 && region.get(x, y) == 1 {
                mask.set(x, y, 1);
            }
        }
    }
    Ok(remove_small_components(&mask, 4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn interior_blocks(of: &OrientationField, margin: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for by in margin..of.grid_h - margin {
            for bx in margin..of.grid_w - margin {
                v.push((bx, by));
            }
        }
        v
    }

    /// Angular distance on the half-circle.
    fn angle_diff(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(PI);
        d.min(PI - d)
    }

    #[test]
    fn orientation_vertical_grating() {
        // Oscillation along x => vertical ridges => theta = pi/2.
        let img = synth::grating(128, 128, 8.0, 0.0, 1.0);
        let of = orientation_field(&img, 16).unwrap();
        for (bx, by) in interior_blocks(&of, 1) {
            assert!(
                angle_diff(of.angle_at(bx, by), PI / 2.0) < 0.02,
                "block ({bx},{by}): {}",
                of.angle_at(bx, by)
            );
            assert!(of.coherence_at(bx, by) > 0.9);
        }
    }

    #[test]
    fn orientation_diagonal_grating() {
        // Oscillation at 135 degrees => ridges at 45 degrees.
        let img = synth::grating(128, 128, 8.0, 3.0 * PI / 4.0, 1.0);
        let of = orientation_field(&img, 16).unwrap();
        for (bx, by) in interior_blocks(&of, 1) {
            assert!(
                angle_diff(of.angle_at(bx, by), PI / 4.0) < 0.05,
                "block ({bx},{by}): {}",
                of.angle_at(bx, by)
            );
        }
    }

    #[test]
    fn orientation_constant_image_has_zero_coherence() {
        let img = GrayImage::constant(64, 64, 0.5).unwrap();
        let of = orientation_field(&img, 16).unwrap();
        assert!(of.coherence.iter().all(|&c| c == 0.0));
        assert!(of.angles.iter().all(|a| (0.0..PI).contains(a)));
    }

    #[test]
    fn orientation_rot90_equivariance() {
        let img = synth::grating(128, 128, 8.0, 0.6, 1.0);
        let rotated = GrayImage::from_fn(128, 128, |x, y| img.get(y, 127 - x));
        let of = orientation_field(&img, 16).unwrap();
        let of_rot = orientation_field(&rotated, 16).unwrap();
        // Uniform texture: compare interior block angles en masse.
        let base = of.angle_at(4, 4);
        let expect = (base + PI / 2.0).rem_euclid(PI);
        for (bx, by) in interior_blocks(&of_rot, 2) {
            assert!(
                angle_diff(of_rot.angle_at(bx, by), expect) < 0.05,
                "rotated block ({bx},{by}): {} vs {}",
                of_rot.angle_at(bx, by),
                expect
            );
        }
    }

    #[test]
    fn orientation_rejects_small_images() {
        let img = GrayImage::constant(20, 20, 0.5).unwrap();
        assert!(matches!(
            orientation_field(&img, 16),
            Err(Error::ImageTooSmall(_))
        ));
    }

    #[test]
    fn frequency_matches_grating_periods() {
        for (period, tol) in [(8.0, 0.01), (12.0, 0.008)] {
            for angle in [0.0, PI / 4.0, PI / 2.0] {
                let img = synth::grating(160, 160, period, angle, 1.0);
                let of = orientation_field(&img, 16).unwrap();
                let ff = ridge_frequency(&img, &of).unwrap();
                for by in 2..ff.grid_h - 2 {
                    for bx in 2..ff.grid_w - 2 {
                        let f = ff.freq_at(bx, by).unwrap_or_else(|| {
                            panic!("invalid block ({bx},{by}) period {period} angle {angle}")
                        });
                        assert!(
                            (f - 1.0 / period).abs() < tol,
                            "period {period} angle {angle}: freq {f}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn frequency_constant_image_all_invalid() {
        let img = GrayImage::constant(64, 64, 0.5).unwrap();
        let of = orientation_field(&img, 16).unwrap();
        let ff = ridge_frequency(&img, &of).unwrap();
        assert!(ff.freqs.iter().all(|f| f.is_none()));
    }

    /// 1-D DFT magnitude of the column means; returns the dominant nonzero bin.
    fn dominant_bin(img: &GrayImage) -> usize {
        let w = img.width();
        let cols: Vec<f64> = (0..w)
            .map(|x| (0..img.height()).map(|y| img.get(x, y)).sum::<f64>() / img.height() as f64)
            .collect();
        let mut best = (0usize, 0.0f64);
        for k in 1..w / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in cols.iter().enumerate() {
                let ph = -2.0 * PI * (k * n) as f64 / w as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            let mag = (re * re + im * im).sqrt();
            if mag > best.1 {
                best = (k, mag);
            }
        }
        best.0
    }

    #[test]
    fn gabor_enhance_preserves_grating_frequency_and_contrast() {
        let img = synth::grating(128, 128, 8.0, 0.0, 0.5);
        let of = orientation_field(&img, 16).unwrap();
        let ff = ridge_frequency(&img, &of).unwrap();
        let out = gabor_enhance(&img, &of, &ff, &GaborParams::default()).unwrap();

        let (ilo, ihi) = img.min_max();
        let (olo, ohi) = out.min_max();
        assert!(ohi - olo >= ihi - ilo, "contrast {} -> {}", ihi - ilo, ohi - olo);
        assert_eq!(dominant_bin(&img), dominant_bin(&out));
    }

    #[test]
    fn gabor_enhance_raises_band_snr() {
        let clean = synth::grating(128, 128, 8.0, 0.0, 0.6);
        let noisy = synth::add_gaussian_noise(&clean, 0.1, 17);
        let of = orientation_field(&noisy, 16).unwrap();
        let ff = ridge_frequency(&noisy, &of).unwrap();
        let out = gabor_enhance(&noisy, &of, &ff, &GaborParams::default()).unwrap();

        // Grating-band energy vs out-of-band energy, accumulated over the
        // per-row spectra so pixel noise stays in the denominator.
        let snr = |im: &GrayImage| {
            let w = im.width();
            let band = w / 8; // period 8 -> bin w/8
            let (mut inband, mut outband) = (0.0, 0.0);
            for y in 0..im.height() {
                for k in 1..w / 2 {
                    let (mut re, mut im_part) = (0.0, 0.0);
                    for n in 0..w {
                        let ph = -2.0 * PI * (k * n) as f64 / w as f64;
                        re += im.get(n, y) * ph.cos();
                        im_part += im.get(n, y) * ph.sin();
                    }
                    let e = re * re + im_part * im_part;
                    if k.abs_diff(band) <= 1 {
                        inband += e;
                    } else {
                        outband += e;
                    }
                }
            }
            inband / outband.max(1e-12)
        };
        assert!(
            snr(&out) > snr(&noisy),
            "snr {} -> {}",
            snr(&noisy),
            snr(&out)
        );
    }

    #[test]
    fn gabor_enhance_constant_passthrough() {
        let img = GrayImage::constant(64, 64, 0.4).unwrap();
        let of = orientation_field(&img, 16).unwrap();
        let ff = ridge_frequency(&img, &of).unwrap();
        let out = gabor_enhance(&img, &of, &ff, &GaborParams::default()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn fuse_fills_missing_halves_and_is_symmetric() {
        let w = 64;
        let grating = synth::grating(w, w, 8.0, 0.0, 1.0);
        let a = GrayImage::from_fn(w, w, |x, y| if x < w / 2 { grating.get(x, y) } else { 1.0 });
        let b = GrayImage::from_fn(w, w, |x, y| if x >= w / 2 { grating.get(x, y) } else { 1.0 });
        let c = GrayImage::constant(w, w, 1.0).unwrap();

        let fused = fuse_enhanced(&a, &b, &c).unwrap();
        // Ridges present on both halves: minima reach the dark stripes.
        for half in [0..w / 2, w / 2..w] {
            let lo = half
                .clone()
                .flat_map(|x| (0..w).map(move |y| (x, y)))
                .map(|(x, y)| fused.get(x, y))
                .fold(f64::INFINITY, f64::min);
            assert!(lo < 0.1, "half {half:?} lost its ridges: min {lo}");
        }

        for (p, q, r) in [(&b, &c, &a), (&c, &a, &b), (&b, &a, &c)] {
            assert_eq!(fuse_enhanced(p, q, r).unwrap(), fused);
        }

        let same = fuse_enhanced(&grating, &grating, &grating).unwrap();
        for (x, y) in same.data().iter().zip(grating.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn binarize_grating_near_half_and_inversion_complements() {
        let img = synth::grating_phased(128, 128, 8.0, 0.0, 1.0, 0.3);
        let of = orientation_field(&img, 16).unwrap();
        let ff = ridge_frequency(&img, &of).unwrap();
        let mask = binarize(&img, &of, &ff).unwrap();
        let ratio = crate::imagecore::white_ratio(&mask);
        assert!((ratio - 0.5).abs() <= 0.05, "white ratio {ratio}");

        let inv = img.invert();
        let of_i = orientation_field(&inv, 16).unwrap();
        let ff_i = ridge_frequency(&inv, &of_i).unwrap();
        let mask_i = binarize(&inv, &of_i, &ff_i).unwrap();
        // Complementary in the interior (boundary ties may differ).
        let mut mismatches = 0usize;
        let mut total = 0usize;
        for y in 16..112 {
            for x in 16..112 {
                total += 1;
                if mask_i.get(x, y) == mask.get(x, y) {
                    mismatches += 1;
                }
            }
        }
        assert!(
            (mismatches as f64) < 0.02 * total as f64,
            "{mismatches}/{total} non-complementary pixels"
        );
    }

    #[test]
    fn binarize_constant_is_empty() {
        let img = GrayImage::constant(64, 64, 0.5).unwrap();
        let of = orientation_field(&img, 16).unwrap();
        let ff = ridge_frequency(&img, &of).unwrap();
        let mask = binarize(&img, &of, &ff).unwrap();
        assert_eq!(mask.count_ones(), 0);
    }

    #[test]
    fn region_mask_grating_vs_noise_halves() {
        let w = 128;
        let grating = synth::grating(w, w, 8.0, 0.0, 1.0);
        let noise = synth::add_gaussian_noise(&GrayImage::constant(w, w, 0.5).unwrap(), 0.18, 3);
        let img = GrayImage::from_fn(w, w, |x, y| {
            if x < w / 2 {
                grating.get(x, y)
            } else {
                noise.get(x, y)
            }
        });
        let of = orientation_field(&img, 16).unwrap();
        let ff = ridge_frequency(&img, &of).unwrap();
        let mask = region_mask(&of, &ff, 0.3).unwrap();

        // Grating half fully covered away from the seam; noise half mostly excluded.
        let mut covered = 0usize;
        let mut grating_px = 0usize;
        let mut leaked = 0usize;
        let mut noise_px = 0usize;
        for y in 0..w {
            for x in 0..w {
                if x < w / 2 - 16 {
                    grating_px += 1;
                    covered += mask.get(x, y) as usize;
                } else if x >= w / 2 + 16 {
                    noise_px += 1;
                    leaked += mask.get(x, y) as usize;
                }
            }
        }
        assert!(
            covered as f64 > 0.95 * grating_px as f64,
            "grating coverage {covered}/{grating_px}"
        );
        assert!(
            (leaked as f64) < 0.10 * noise_px as f64,
            "noise leak {leaked}/{noise_px}"
        );

        let constant = GrayImage::constant(64, 64, 0.5).unwrap();
        let of = orientation_field(&constant, 16).unwrap();
        let ff = ridge_frequency(&constant, &of).unwrap();
        let mask = region_mask(&of, &ff, 0.3).unwrap();
        assert_eq!(mask.count_ones(), 0);
    }

    #[test]
    fn remove_small_components_drops_speckles_only() {
        let mut mask = BinaryMask::zeros(16, 16);
        // 3-pixel speckle.
        mask.set(1, 1, 1);
        mask.set(2, 1, 1);
        mask.set(2, 2, 1);
        // 5-pixel bar.
        for x in 6..11 {
            mask.set(x, 8, 1);
        }
        let cleaned = remove_small_components(&mask, 4);
        assert_eq!(cleaned.get(1, 1), 0);
        assert_eq!(cleaned.get(2, 2), 0);
        for x in 6..11 {
            assert_eq!(cleaned.get(x, 8), 1);
        }
    }

    #[test]
    fn groundtruth_on_synthetic_latent() {
        let (img, truth) = synth::contaminated_grating(192, 192, 42);
        let mask = make_groundtruth(&img, &GroundtruthConfig::default()).unwrap();
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in mask.data().iter().zip(truth.data()) {
            inter += (*a == 1 && *b == 1) as usize;
            union += (*a == 1 || *b == 1) as usize;
        }
        let iou = inter as f64 / union.max(1) as f64;
        assert!(iou >= 0.7, "ground-truth IoU {iou}");
    }

    #[test]
    fn groundtruth_constant_is_empty_and_deterministic() {
        let img = GrayImage::constant(96, 96, 0.5).unwrap();
        let cfg = GroundtruthConfig::default();
        let mask = make_groundtruth(&img, &cfg).unwrap();
        assert_eq!(mask.count_ones(), 0);

        let (latent, _) = synth::contaminated_grating(96, 96, 7);
        let a = make_groundtruth(&latent, &cfg).unwrap();
        let b = make_groundtruth(&latent, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn groundtruth_has_no_small_speckles() {
        let (img, _) = synth::contaminated_grating(160, 160, 9);
        let mask = make_groundtruth(&img, &GroundtruthConfig::default()).unwrap();
        let cleaned = remove_small_components(&mask, 4);
        assert_eq!(mask, cleaned);
    }
}
