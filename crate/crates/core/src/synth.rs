//! Synthetic fixture generators: sinusoidal gratings, contaminated latent
//! look-alikes with construction-known ridge masks, and seeded datasets for
//! the toy training harness. Everything is deterministic given a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imagecore::{BinaryMask, GrayImage};
use crate::Result;

/// Sinusoidal grating `0.5 + 0.5*amplitude*sin(2*pi*u/period)` where `u` is
/// the coordinate along `angle` (the oscillation direction). `angle = 0`
/// gives vertical ridges.
pub fn grating(width: usize, height: usize, period: f64, angle: f64, amplitude: f64) -> GrayImage {
    grating_phased(width, height, period, angle, amplitude, 0.0)
}

/// `grating` with an additive phase offset in radians. A nonzero phase keeps
/// integer sample points away from the exact zero crossings of the sinusoid.
pub fn grating_phased(
    width: usize,
    height: usize,
    period: f64,
    angle: f64,
    amplitude: f64,
    phase: f64,
) -> GrayImage {
    let (c, s) = (angle.cos(), angle.sin());
    GrayImage::from_fn(width, height, |x, y| {
        let u = x as f64 * c + y as f64 * s;
        0.5 + 0.5 * amplitude * (2.0 * std::f64::consts::PI * u / period + phase).sin()
    })
}

/// Axis-aligned square grating with `period/2`-pixel stripes of 0 and 1.
pub fn square_grating(width: usize, height: usize, period: usize) -> GrayImage {
    GrayImage::from_fn(width, height, |x, _| {
        if (x / (period / 2)).is_multiple_of(2) {
            0.0
        } else {
            1.0
        }
    })
}

/// Adds Gaussian noise of the given standard deviation (Box-Muller over a
/// seeded ChaCha stream), clamping back into `[0, 1]`.
pub fn add_gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        img.get(x, y) + sigma * normal(&mut rng)
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Everything that varies between generated latents.
#[derive(Debug, Clone)]
pub struct LatentFixtureParams {
    /// Ridge period range in pixels.
    pub period: (f64, f64),
    /// Peak-to-mean grating amplitude inside the blob.
    pub amplitude: f64,
    /// Background intensity.
    pub background: f64,
    /// Background noise standard deviation.
    pub noise: f64,
    /// Dark strokes drawn over the whole image.
    pub lines: usize,
    /// Small filled rectangles imitating printed text fragments.
    pub text_marks: usize,
    /// Stroke/mark ink intensity.
    pub ink: f64,
}

impl Default for LatentFixtureParams {
    fn default() -> Self {
        Self {
            period: (8.0, 11.0),
            amplitude: 0.42,
            background: 0.88,
            noise: 0.02,
            lines: 3,
            text_marks: 4,
            ink: 0.35,
        }
    }
}

/// A latent look-alike: an elliptical blob of dark-ridge grating over a
/// noisy paper-like background, contaminated by strokes and text marks.
/// The returned mask holds the ridge pixels (dark grating half) inside the
/// blob — the ground truth known by construction.
pub fn contaminated_grating_with(
    width: usize,
    height: usize,
    seed: u64,
    p: &LatentFixtureParams,
) -> (GrayImage, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = rng.random_range(p.period.0..=p.period.1);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (angle.cos(), angle.sin());
    let cx = width as f64 * rng.random_range(0.42..0.58);
    let cy = height as f64 * rng.random_range(0.42..0.58);
    let rx = width as f64 * rng.random_range(0.30..0.38);
    let ry = height as f64 * rng.random_range(0.30..0.38);

    let mut mask = BinaryMask::zeros(width, height);
    let mut img = GrayImage::from_fn(width, height, |x, y| {
        let dx = (x as f64 - cx) / rx;
        let dy = (y as f64 - cy) / ry;
        if dx * dx + dy * dy <= 1.0 {
            let u = x as f64 * c + y as f64 * s;
            let phase = (2.0 * std::f64::consts::PI * u / period).sin();
            // Ridges are the dark half of the oscillation.
            0.5 - p.amplitude * phase
        } else {
            p.background
        }
    });
    for y in 0..height {
        for x in 0..width {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                let u = x as f64 * c + y as f64 * s;
                if (2.0 * std::f64::consts::PI * u / period).sin() > 0.0 {
                    mask.set(x, y, 1);
                }
            }
        }
    }

    for _ in 0..p.lines {
        let x0 = rng.random_range(0.0..width as f64);
        let y0 = rng.random_range(0.0..height as f64);
        let x1 = rng.random_range(0.0..width as f64);
        let y1 = rng.random_range(0.0..height as f64);
        stamp_segment(&mut img, (x0, y0), (x1, y1), 1.0, p.ink);
    }
    for _ in 0..p.text_marks {
        let mw = rng.random_range(4..9usize);
        let mh = rng.random_range(6..12usize);
        let x0 = rng.random_range(0..width.saturating_sub(mw).max(1));
        let y0 = rng.random_range(0..height.saturating_sub(mh).max(1));
        stamp_rect(&mut img, x0, y0, mw, mh, p.ink);
    }

    if p.noise > 0.0 {
        img = add_gaussian_noise(&img, p.noise, seed.wrapping_add(0x9e3779b9));
    }
    (img, mask)
}

/// `contaminated_grating_with` using the default parameters.
pub fn contaminated_grating(width: usize, height: usize, seed: u64) -> (GrayImage, BinaryMask) {
    contaminated_grating_with(width, height, seed, &LatentFixtureParams::default())
}

fn stamp_segment(img: &mut GrayImage, a: (f64, f64), b: (f64, f64), half_width: f64, ink: f64) {
    let (w, h) = (img.width(), img.height());
    let mut data = img.data().to_vec();
    let (ax, ay) = a;
    let (bx, by) = b;
    let len2 = (bx - ax) * (bx - ax) + (by - ay) * (by - ay);
    let x_lo = (ax.min(bx) - half_width - 1.0).floor().max(0.0) as usize;
    let x_hi = ((ax.max(bx) + half_width + 1.0).ceil() as usize).min(w - 1);
    let y_lo = (ay.min(by) - half_width - 1.0).floor().max(0.0) as usize;
    let y_hi = ((ay.max(by) + half_width + 1.0).ceil() as usize).min(h - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let t = if len2 > 0.0 {
                (((x as f64 - ax) * (bx - ax) + (y as f64 - ay) * (by - ay)) / len2)
                    .clamp(0.0, 1.0)
            } else {
                0.0
            };
            let px = ax + t * (bx - ax);
            let py = ay + t * (by - ay);
            let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
            if d <= half_width {
                data[y * w + x] = ink;
            }
        }
    }
    *img = GrayImage::from_fn(w, h, |x, y| data[y * w + x]);
}

fn stamp_rect(img: &mut GrayImage, x0: usize, y0: usize, mw: usize, mh: usize, ink: f64) {
    let (w, h) = (img.width(), img.height());
    let mut data = img.data().to_vec();
    for y in y0..(y0 + mh).min(h) {
        for x in x0..(x0 + mw).min(w) {
            data[y * w + x] = ink;
        }
    }
    *img = GrayImage::from_fn(w, h, |x, y| data[y * w + x]);
}

/// Seeded dataset of latent look-alikes with construction-known ridge masks.
pub fn grating_dataset(count: usize, size: usize, seed: u64) -> Vec<(GrayImage, BinaryMask)> {
    (0..count)
        .map(|i| contaminated_grating(size, size, seed.wrapping_add(i as u64)))
        .collect()
}

/// Writes a dataset as `<index>.png` plus `<index>.mask.png` pairs.
pub fn write_dataset(dir: &std::path::Path, pairs: &[(GrayImage, BinaryMask)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for (i, (img, mask)) in pairs.iter().enumerate() {
        crate::imagecore::save_gray(img, dir.join(format!("{i:04}.png")))?;
        crate::imagecore::save_mask(mask, dir.join(format!("{i:04}.mask.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grating_is_periodic_and_in_range() {
        let img = grating(32, 32, 8.0, 0.0, 1.0);
        for y in 0..32 {
            for x in 0..24 {
                assert!((img.get(x, y) - img.get(x + 8, y)).abs() < 1e-9);
            }
        }
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fixtures_are_deterministic_per_seed() {
        let (a_img, a_mask) = contaminated_grating(64, 64, 5);
        let (b_img, b_mask) = contaminated_grating(64, 64, 5);
        assert_eq!(a_img, b_img);
        assert_eq!(a_mask, b_mask);
        let (c_img, _) = contaminated_grating(64, 64, 6);
        assert_ne!(a_img, c_img);
    }

    #[test]
    fn fixture_mask_covers_dark_pixels() {
        // Ridge pixels should be darker on average than the rest.
        let (img, mask) = contaminated_grating(96, 96, 1);
        let (mut ridge, mut nridge) = (0.0, 0usize);
        let (mut other, mut nother) = (0.0, 0usize);
        for (k, &v) in img.data().iter().enumerate() {
            if mask.data()[k] == 1 {
                ridge += v;
                nridge += 1;
            } else {
                other += v;
                nother += 1;
            }
        }
        assert!(nridge > 500);
        assert!(ridge / nridge as f64 + 0.2 < other / nother as f64);
    }
}
