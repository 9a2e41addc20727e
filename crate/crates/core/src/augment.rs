//! Training-time augmentation of (image, mask) pairs.
//!
//! Geometric transforms (crop, flip/rotate, resized crop) apply identically
//! to image and mask; appearance transforms (cutout, strokes, glyphs) touch
//! the image only. Everything is driven by an explicit ChaCha stream, so a
//! (seed, index) pair fully determines the output regardless of scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imagecore::{BinaryMask, GrayImage};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Output patch side.
    pub crop: usize,
    /// Probability of one geometric transform (hflip/vflip/rot90).
    pub p_geom: f64,
    /// Probability of a random resized crop.
    pub p_rrc: f64,
    /// Resized-crop scale range.
    pub rrc_scale: (f64, f64),
    /// Probability of cutout holes.
    pub p_cutout: f64,
    pub cutout_max_holes: usize,
    /// Maximum hole side (width, height).
    pub cutout_hole: (usize, usize),
    /// Probability of random dark strokes.
    pub p_lines: f64,
    /// Probability of random glyphs.
    pub p_letters: f64,
    pub line_count: (usize, usize),
    pub line_width: (f64, f64),
    pub letter_count: (usize, usize),
    pub letter_scale: (usize, usize),
    /// Ink intensity range for strokes and glyphs.
    pub ink: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 256,
            p_geom: 0.75,
            p_rrc: 0.5,
            rrc_scale: (0.8, 1.2),
            p_cutout: 0.3,
            cutout_max_holes: 5,
            cutout_hole: (10, 10),
            p_lines: 0.3,
            p_letters: 0.3,
            line_count: (1, 4),
            line_width: (1.0, 3.0),
            letter_count: (1, 6),
            letter_scale: (2, 6),
            ink: (0.0, 0.25),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_geom", self.p_geom),
            ("p_rrc", self.p_rrc),
            ("p_cutout", self.p_cutout),
            ("p_lines", self.p_lines),
            ("p_letters", self.p_letters),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.crop == 0 {
            return Err(Error::InvalidParam("crop must be >= 1".into()));
        }
        if self.rrc_scale.0.is_nan()
            || self.rrc_scale.1.is_nan()
            || self.rrc_scale.0 <= 0.0
            || self.rrc_scale.1 < self.rrc_scale.0
        {
            return Err(Error::InvalidParam("rrc_scale range must be positive".into()));
        }
        if self.cutout_max_holes == 0 || self.cutout_hole.0 == 0 || self.cutout_hole.1 == 0 {
            return Err(Error::InvalidParam("cutout sizes must be >= 1".into()));
        }
        if self.line_count.0 == 0 || self.line_count.1 < self.line_count.0 {
            return Err(Error::InvalidParam("line_count range invalid".into()));
        }
        if self.letter_scale.0 == 0 || self.letter_scale.1 < self.letter_scale.0 {
            return Err(Error::InvalidParam("letter_scale range invalid".into()));
        }
        Ok(())
    }
}

/// One geometric transform choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomOp {
    HFlip,
    VFlip,
    /// Counter-clockwise quarter turns, 1..=3.
    Rot90(u8),
}

/// Resized-crop record. `zoom_in` crops a sub-window and scales it up;
/// otherwise the patch scales down onto a filled canvas.
#[derive(Debug, Clone)]
pub struct RrcOp {
    pub scale: f64,
    /// Sub-window (x, y, side) for zoom-in.
    pub window: (usize, usize, usize),
    pub zoom_in: bool,
    /// Canvas placement (x, y, side) for zoom-out.
    pub placement: (usize, usize, usize),
    /// Image canvas fill for zoom-out.
    pub fill: f64,
}

/// Everything applied to one pair, in application order.
#[derive(Debug, Clone, Default)]
pub struct AugmentTrace {
    pub crop: (usize, usize),
    pub geom: Option<GeomOp>,
    pub rrc: Option<RrcOp>,
    /// Cutout rectangles (x, y, w, h); image only.
    pub cutout: Vec<(usize, usize, usize, usize)>,
    pub lines: bool,
    pub letters: bool,
}

/// The per-item stream rule: one ChaCha stream per dataset index.
pub fn rng_for_index(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn crop_gray(img: &GrayImage, x0: usize, y0: usize, side: usize) -> GrayImage {
    GrayImage::from_fn(side, side, |x, y| img.get(x0 + x, y0 + y))
}

fn crop_mask(mask: &BinaryMask, x0: usize, y0: usize, side: usize) -> BinaryMask {
    let mut out = BinaryMask::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            out.set(x, y, mask.get(x0 + x, y0 + y));
        }
    }
    out
}

fn geom_gray(img: &GrayImage, op: GeomOp) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    match op {
        GeomOp::HFlip => GrayImage::from_fn(w, h, |x, y| img.get(w - 1 - x, y)),
        GeomOp::VFlip => GrayImage::from_fn(w, h, |x, y| img.get(x, h - 1 - y)),
        GeomOp::Rot90(k) => {
            let mut out = img.clone();
            for _ in 0..k {
                let (ow, oh) = (out.height(), out.width());
                let prev = out;
                out = GrayImage::from_fn(ow, oh, |x, y| prev.get(ow - 1 - y, x));
            }
            out
        }
    }
}

fn geom_mask(mask: &BinaryMask, op: GeomOp) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let from_fn = |fw: usize, fh: usize, f: &dyn Fn(usize, usize) -> u8| {
        let mut out = BinaryMask::zeros(fw, fh);
        for y in 0..fh {
            for x in 0..fw {
                out.set(x, y, f(x, y));
            }
        }
        out
    };
    match op {
        GeomOp::HFlip => from_fn(w, h, &|x, y| mask.get(w - 1 - x, y)),
        GeomOp::VFlip => from_fn(w, h, &|x, y| mask.get(x, h - 1 - y)),
        GeomOp::Rot90(k) => {
            let mut out = mask.clone();
            for _ in 0..k {
                let (ow, oh) = (out.height(), out.width());
                let prev = out;
                let mut next = BinaryMask::zeros(ow, oh);
                for y in 0..oh {
                    for x in 0..ow {
                        next.set(x, y, prev.get(ow - 1 - y, x));
                    }
                }
                out = next;
            }
            out
        }
    }
}

fn bilinear_resize(img: &GrayImage, tw: usize, th: usize) -> GrayImage {
    let (sw, sh) = (img.width() as f64, img.height() as f64);
    GrayImage::from_fn(tw, th, |x, y| {
        let sx = ((x as f64 + 0.5) * sw / tw as f64 - 0.5).clamp(0.0, sw - 1.0);
        let sy = ((y as f64 + 0.5) * sh / th as f64 - 0.5).clamp(0.0, sh - 1.0);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let v00 = img.get_clamped(x0, y0);
        let v10 = img.get_clamped(x0 + 1, y0);
        let v01 = img.get_clamped(x0, y0 + 1);
        let v11 = img.get_clamped(x0 + 1, y0 + 1);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    })
}

fn nearest_resize_mask(mask: &BinaryMask, tw: usize, th: usize) -> BinaryMask {
    let (sw, sh) = (mask.width(), mask.height());
    let mut out = BinaryMask::zeros(tw, th);
    for y in 0..th {
        let sy = (((y as f64 + 0.5) * sh as f64 / th as f64) as usize).min(sh - 1);
        for x in 0..tw {
            let sx = (((x as f64 + 0.5) * sw as f64 / tw as f64) as usize).min(sw - 1);
            out.set(x, y, mask.get(sx, sy));
        }
    }
    out
}

fn apply_rrc_gray(img: &GrayImage, op: &RrcOp, crop: usize) -> GrayImage {
    if op.zoom_in {
        let (x, y, side) = op.window;
        bilinear_resize(&crop_gray(img, x, y, side), crop, crop)
    } else {
        let (ox, oy, side) = op.placement;
        let scaled = bilinear_resize(img, side, side);
        GrayImage::from_fn(crop, crop, |x, y| {
            if x >= ox && x < ox + side && y >= oy && y < oy + side {
                scaled.get(x - ox, y - oy)
            } else {
                op.fill
            }
        })
    }
}

fn apply_rrc_mask(mask: &BinaryMask, op: &RrcOp, crop: usize) -> BinaryMask {
    if op.zoom_in {
        let (x, y, side) = op.window;
        nearest_resize_mask(&crop_mask(mask, x, y, side), crop, crop)
    } else {
        let (ox, oy, side) = op.placement;
        let scaled = nearest_resize_mask(mask, side, side);
        let mut out = BinaryMask::zeros(crop, crop);
        for y in 0..side {
            for x in 0..side {
                out.set(ox + x, oy + y, scaled.get(x, y));
            }
        }
        out
    }
}

/// Replays the recorded geometric transforms (crop, flip/rotate, resized
/// crop) on a raw mask; appearance transforms never touch masks.
pub fn replay_mask(mask: &BinaryMask, trace: &AugmentTrace, crop: usize) -> BinaryMask {
    let mut out = crop_mask(mask, trace.crop.0, trace.crop.1, crop);
    if let Some(op) = trace.geom {
        out = geom_mask(&out, op);
    }
    if let Some(op) = &trace.rrc {
        out = apply_rrc_mask(&out, op, crop);
    }
    out
}

/// Applies the full augmentation stack to one (image, mask) pair.
pub fn augment_pair(
    img: &GrayImage,
    mask: &BinaryMask,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(GrayImage, BinaryMask, AugmentTrace)> {
    cfg.validate()?;
    if img.width() != mask.width() || img.height() != mask.height() {
        return Err(Error::DimensionMismatch {
            expected_w: img.width(),
            expected_h: img.height(),
            got_w: mask.width(),
            got_h: mask.height(),
        });
    }
    let crop = cfg.crop;
    if img.width() < crop || img.height() < crop {
        return Err(Error::ImageTooSmall(format!(
            "{}x{} source smaller than the {crop}-px crop",
            img.width(),
            img.height()
        )));
    }
    let mut trace = AugmentTrace::default();

    let x0 = rng.random_range(0..=img.width() - crop);
    let y0 = rng.random_range(0..=img.height() - crop);
    trace.crop = (x0, y0);
    let mut out_img = crop_gray(img, x0, y0, crop);
    let mut out_mask = crop_mask(mask, x0, y0, crop);

    if rng.random::<f64>() < cfg.p_geom {
        let op = match rng.random_range(0..3u8) {
            0 => GeomOp::HFlip,
            1 => GeomOp::VFlip,
            _ => GeomOp::Rot90(rng.random_range(1..=3u8)),
        };
        trace.geom = Some(op);
        out_img = geom_gray(&out_img, op);
        out_mask = geom_mask(&out_mask, op);
    }

    if rng.random::<f64>() < cfg.p_rrc {
        let scale = rng.random_range(cfg.rrc_scale.0..=cfg.rrc_scale.1);
        let op = if scale >= 1.0 {
            let side = ((crop as f64 / scale).round() as usize).clamp(8, crop);
            let wx = rng.random_range(0..=crop - side);
            let wy = rng.random_range(0..=crop - side);
            RrcOp {
                scale,
                window: (wx, wy, side),
                zoom_in: true,
                placement: (0, 0, crop),
                fill: 0.0,
            }
        } else {
            let side = ((crop as f64 * scale).round() as usize).clamp(8, crop);
            let ox = rng.random_range(0..=crop - side);
            let oy = rng.random_range(0..=crop - side);
            RrcOp {
                scale,
                window: (0, 0, crop),
                zoom_in: false,
                placement: (ox, oy, side),
                fill: out_img.mean(),
            }
        };
        out_img = apply_rrc_gray(&out_img, &op, crop);
        out_mask = apply_rrc_mask(&out_mask, &op, crop);
        trace.rrc = Some(op);
    }

    if rng.random::<f64>() < cfg.p_cutout {
        let holes = rng.random_range(1..=cfg.cutout_max_holes);
        let mut data = out_img.data().to_vec();
        for _ in 0..holes {
            let hw = rng.random_range(1..=cfg.cutout_hole.0.min(crop));
            let hh = rng.random_range(1..=cfg.cutout_hole.1.min(crop));
            let hx = rng.random_range(0..=crop - hw);
            let hy = rng.random_range(0..=crop - hh);
            trace.cutout.push((hx, hy, hw, hh));
            for y in hy..hy + hh {
                for x in hx..hx + hw {
                    data[y * crop + x] = 0.0;
                }
            }
        }
        out_img = GrayImage::new(crop, crop, data).expect("cutout stays in range");
    }

    if rng.random::<f64>() < cfg.p_lines {
        out_img = draw_random_lines_with(&out_img, cfg, rng);
        trace.lines = true;
    }
    if rng.random::<f64>() < cfg.p_letters {
        out_img = draw_random_letters_with(&out_img, cfg, rng);
        trace.letters = true;
    }

    Ok((out_img, out_mask, trace))
}

/// Minimum stroke length the line drawer aims for (image size permitting).
const MIN_STROKE_LEN: f64 = 10.0;

/// Draws 1-4 anti-aliased dark strokes with the default parameter ranges.
pub fn draw_random_lines(img: &GrayImage, rng: &mut ChaCha8Rng) -> GrayImage {
    draw_random_lines_with(img, &AugmentConfig::default(), rng)
}

fn draw_random_lines_with(
    img: &GrayImage,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> GrayImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let mut data = img.data().to_vec();
    let strokes = rng.random_range(cfg.line_count.0..=cfg.line_count.1);
    for _ in 0..strokes {
        let width = rng.random_range(cfg.line_width.0..=cfg.line_width.1);
        let ink = rng.random_range(cfg.ink.0..=cfg.ink.1);
        let x0 = rng.random_range(0.0..w);
        let y0 = rng.random_range(0.0..h);
        let max_len = (w.min(h) * 0.6).max(MIN_STROKE_LEN + 2.0);
        let len = rng.random_range(MIN_STROKE_LEN.min(max_len)..=max_len);
        // Pick an angle whose endpoint stays in bounds; shrink as last resort.
        let mut best = (x0, y0);
        for _ in 0..16 {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let (x1, y1) = (x0 + len * ang.cos(), y0 + len * ang.sin());
            if x1 >= 0.0 && x1 < w && y1 >= 0.0 && y1 < h {
                best = (x1, y1);
                break;
            }
            best = (x1.clamp(0.0, w - 1.0), y1.clamp(0.0, h - 1.0));
        }
        stroke(&mut data, img.width(), img.height(), (x0, y0), best, width, ink);
    }
    GrayImage::new(img.width(), img.height(), data).expect("stroke ink stays in range")
}

/// Anti-aliased stroke: coverage falls off linearly over one pixel at the
/// stroke boundary.
fn stroke(
    data: &mut [f64],
    w: usize,
    h: usize,
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
    ink: f64,
) {
    let half = width / 2.0;
    let (ax, ay) = a;
    let (bx, by) = b;
    let len2 = (bx - ax).powi(2) + (by - ay).powi(2);
    let x_lo = (ax.min(bx) - half - 1.0).floor().max(0.0) as usize;
    let x_hi = ((ax.max(bx) + half + 1.0).ceil() as usize).min(w.saturating_sub(1));
    let y_lo = (ay.min(by) - half - 1.0).floor().max(0.0) as usize;
    let y_hi = ((ay.max(by) + half + 1.0).ceil() as usize).min(h.saturating_sub(1));
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let t = if len2 > 0.0 {
                (((x as f64 - ax) * (bx - ax) + (y as f64 - ay) * (by - ay)) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let px = ax + t * (bx - ax);
            let py = ay + t * (by - ay);
            let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
            let cov = (half + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                let k = y * w + x;
                data[k] = ((1.0 - cov) * data[k] + cov * ink).clamp(0.0, 1.0);
            }
        }
    }
}

/// Draws 1-6 random glyphs with the default parameter ranges.
pub fn draw_random_letters(img: &GrayImage, rng: &mut ChaCha8Rng) -> GrayImage {
    draw_random_letters_with(img, &AugmentConfig::default(), rng)
}

fn draw_random_letters_with(
    img: &GrayImage,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> GrayImage {
    let mut out = img.clone();
    let glyphs = rng.random_range(cfg.letter_count.0..=cfg.letter_count.1);
    for _ in 0..glyphs {
        let ch = GLYPHS[rng.random_range(0..GLYPHS.len())].0;
        let scale = rng.random_range(cfg.letter_scale.0..=cfg.letter_scale.1);
        let ink = rng.random_range(cfg.ink.0..=cfg.ink.1);
        let gw = 5 * scale;
        let gh = 7 * scale;
        if img.width() < gw || img.height() < gh {
            continue;
        }
        let x = rng.random_range(0..=img.width() - gw);
        let y = rng.random_range(0..=img.height() - gh);
        draw_glyph(&mut out, ch, scale, x, y, ink);
    }
    out
}

/// Stamps one glyph from the built-in 5x7 font at an integer scale.
pub fn draw_glyph(img: &mut GrayImage, ch: char, scale: usize, x0: usize, y0: usize, ink: f64) {
    let Some(rows) = glyph_rows(ch) else { return };
    let (w, h) = (img.width(), img.height());
    let mut data = img.data().to_vec();
    for (row, bits) in rows.iter().enumerate() {
        for col in 0..5 {
            if bits & (1 << (4 - col)) == 0 {
                continue;
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    let x = x0 + col * scale + dx;
                    let y = y0 + row * scale + dy;
                    if x < w && y < h {
                        data[y * w + x] = ink.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    *img = GrayImage::new(w, h, data).expect("glyph ink stays in range");
}

/// Number of set bits in a glyph's stencil.
pub fn glyph_stencil_bits(ch: char) -> Option<u32> {
    glyph_rows(ch).map(|rows| rows.iter().map(|r| r.count_ones()).sum())
}

fn glyph_rows(ch: char) -> Option<[u8; 7]> {
    GLYPHS
        .iter()
        .find(|(c, _)| *c == ch.to_ascii_uppercase())
        .map(|(_, rows)| *rows)
}

/// 5x7 dot-matrix font, A-Z then 0-9; bit 4 is the leftmost column.
const GLYPHS: [(char, [u8; 7]); 36] = [
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('B', [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110]),
    ('C', [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('D', [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('F', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('G', [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111]),
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('I', [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('J', [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('N', [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('Q', [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101]),
    ('R', [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('U', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('V', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('W', [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010]),
    ('X', [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001]),
    ('Y', [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('Z', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111]),
    ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
    ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('2', [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111]),
    ('3', [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110]),
    ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
    ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
    ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
    ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
    ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
    ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
];
