//! Grayscale/mask containers, 8-bit raster I/O, and pixel statistics.
//!
//! Intensities live in `[0, 1]` as `f64`; quantization to 8 bits happens only
//! at file boundaries (`v/255` on load, `round(v*255)` on save). Supported
//! containers are PNG and binary PGM (P5), selected by file extension.

use std::path::Path;

use crate::{Error, Result};

/// Single-channel intensity raster, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Builds an image from row-major data, validating the type invariants.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension);
        }
        if data.len() != width * height {
            return Err(Error::InvalidParam(format!(
                "data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidParam(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant-valued image.
    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)`; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped to the image bounds.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn same_dims(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rebuild from raw parts without revalidating; callers must uphold the
    /// `[0, 1]` invariant.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        debug_assert!(data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        Self {
            width,
            height,
            data,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Per-pixel complement `1 - v`.
    pub fn invert(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width,
            self.height,
            self.data.iter().map(|v| 1.0 - v).collect(),
        )
    }
}

/// Binary ridge mask, row-major, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension);
        }
        if data.len() != width * height {
            return Err(Error::InvalidParam(format!(
                "data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParam(format!("mask value {v} not in {{0, 1}}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    /// Lift to a `{0.0, 1.0}` grayscale plane.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width,
            self.height,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Fraction of 1-pixels in the mask.
pub fn white_ratio(mask: &BinaryMask) -> f64 {
    mask.count_ones() as f64 / (mask.width * mask.height) as f64
}

/// Per-pixel `wa*a + wb*b`, clamped to `[0, 1]`.
///
/// The weights must be in `[0, 1]` and sum to 1 within 1e-9.
pub fn blend_weighted(a: &GrayImage, b: &GrayImage, wa: f64, wb: f64) -> Result<GrayImage> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch {
            expected_w: a.width,
            expected_h: a.height,
            got_w: b.width,
            got_h: b.height,
        });
    }
    if !(0.0..=1.0).contains(&wa) || !(0.0..=1.0).contains(&wb) {
        return Err(Error::InvalidParam(format!(
            "blend weights ({wa}, {wb}) outside [0, 1]"
        )));
    }
    if (wa + wb - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "blend weights sum to {} (expected 1)",
            wa + wb
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (wa * x + wb * y).clamp(0.0, 1.0))
        .collect();
    Ok(GrayImage::from_raw(a.width, a.height, data))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_extension(path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" | "pgm" => Ok(()),
        other => Err(Error::Unsupported {
            path: path.to_path_buf(),
            reason: format!("extension '{other}' (expected png or pgm)"),
        }),
    }
}

fn decode_to_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    check_extension(path)?;
    if !path.exists() {
        return Err(io_err(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let dynamic = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::ZeroDimension);
    }
    // Only 8-bit variants are supported; multi-channel data is reduced by the
    // BT.601 luma weights.
    let gray: Vec<u8> = match dynamic {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        image::DynamicImage::ImageLumaA8(buf) => {
            buf.pixels().map(|p| p.0[0]).collect()
        }
        image::DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| luma601(p.0)).collect(),
        image::DynamicImage::ImageRgba8(buf) => {
            buf.pixels().map(|p| luma601([p.0[0], p.0[1], p.0[2]])).collect()
        }
        other => {
            return Err(Error::Unsupported {
                path: path.to_path_buf(),
                reason: format!("bit depth/color {:?} (only 8-bit rasters)", other.color()),
            })
        }
    };
    Ok((w, h, gray))
}

#[inline]
fn luma601(rgb: [u8; 3]) -> u8 {
    let y = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Loads an 8-bit raster and maps intensities to `[0, 1]` by `v/255`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let (w, h, bytes) = decode_to_bytes(path)?;
    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(GrayImage::from_raw(w, h, data))
}

/// Saves as an 8-bit single-channel file; each value quantizes to the nearest
/// of 256 levels. PGM output is the binary (P5) variant.
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_extension(path)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let map_err = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => io_err(path, io),
        other => Error::Unsupported {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        use image::ImageEncoder;
        let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(
                &bytes,
                img.width as u32,
                img.height as u32,
                image::ExtendedColorType::L8,
            )
            .map_err(map_err)
    } else {
        let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
            .expect("buffer sized from image dims");
        buf.save(path).map_err(map_err)
    }
}

/// Loads a mask stored as an 8-bit file holding exactly the values {0, 255}.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let (w, h, bytes) = decode_to_bytes(path)?;
    let mut data = Vec::with_capacity(bytes.len());
    for b in bytes {
        match b {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::MaskNotBinary {
                    path: path.to_path_buf(),
                    value: other,
                })
            }
        }
    }
    BinaryMask::new(w, h, data)
}

/// Saves a mask as an 8-bit file with 1 -> 255, 0 -> 0.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let gray = GrayImage::from_raw(
        mask.width,
        mask.height,
        mask.data.iter().map(|&v| v as f64).collect(),
    );
    save_gray(&gray, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the tempdir so the path stays valid for the test body.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn load_scales_bytes_by_255() {
        let path = tmpfile("t.png");
        let buf = image::GrayImage::from_raw(2, 2, vec![0, 255, 128, 64]).unwrap();
        buf.save(&path).unwrap();
        let img = load_gray(&path).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn save_then_load_is_byte_identical() {
        for ext in ["png", "pgm"] {
            let path = tmpfile(&format!("t.{ext}"));
            let bytes: Vec<u8> = (0..=255).collect();
            let img = GrayImage::new(16, 16, bytes.iter().map(|&b| b as f64 / 255.0).collect())
                .unwrap();
            save_gray(&img, &path).unwrap();
            let back = load_gray(&path).unwrap();
            assert_eq!(img, back, "round trip failed for {ext}");
        }
    }

    #[test]
    fn pgm_files_are_binary_p5() {
        let path = tmpfile("t.pgm");
        let img = GrayImage::constant(4, 4, 0.5).unwrap();
        save_gray(&img, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..2], b"P5");
    }

    #[test]
    fn rgb_equal_channels_reduce_to_v_over_255() {
        let path = tmpfile("t.png");
        let v = 77u8;
        let buf = image::RgbImage::from_pixel(3, 2, image::Rgb([v, v, v]));
        buf.save(&path).unwrap();
        let img = load_gray(&path).unwrap();
        for &p in img.data() {
            assert!((p - v as f64 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn save_quantizes_to_nearest_level() {
        let path = tmpfile("t.png");
        let img = GrayImage::constant(3, 3, 0.5).unwrap();
        save_gray(&img, &path).unwrap();
        let dynamic = image::open(&path).unwrap().into_luma8();
        assert!(dynamic.pixels().all(|p| p.0[0] == 128));

        save_gray(&GrayImage::constant(3, 3, 0.0).unwrap(), &path).unwrap();
        assert!(image::open(&path).unwrap().into_luma8().pixels().all(|p| p.0[0] == 0));
        save_gray(&GrayImage::constant(3, 3, 1.0).unwrap(), &path).unwrap();
        assert!(image::open(&path).unwrap().into_luma8().pixels().all(|p| p.0[0] == 255));
    }

    #[test]
    fn missing_file_and_bad_extension_error() {
        assert!(matches!(load_gray("/nonexistent/x.png"), Err(Error::Io { .. })));
        assert!(matches!(
            load_gray("/nonexistent/x.tiff"),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn mask_io_rejects_intermediate_values() {
        let path = tmpfile("m.png");
        let buf = image::GrayImage::from_raw(2, 1, vec![0, 254]).unwrap();
        buf.save(&path).unwrap();
        assert!(matches!(
            load_mask(&path),
            Err(Error::MaskNotBinary { value: 254, .. })
        ));

        let mask = BinaryMask::new(2, 1, vec![1, 0]).unwrap();
        save_mask(&mask, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }

    #[test]
    fn white_ratio_fixtures() {
        let zeros = BinaryMask::zeros(10, 10);
        assert_eq!(white_ratio(&zeros), 0.0);
        let ones = BinaryMask::new(10, 10, vec![1; 100]).unwrap();
        assert_eq!(white_ratio(&ones), 1.0);

        // 13107/262144 sits just below the 5% fallback threshold.
        let mut data = vec![0u8; 512 * 512];
        for v in data.iter_mut().take(13107) {
            *v = 1;
        }
        let m = BinaryMask::new(512, 512, data).unwrap();
        let r = white_ratio(&m);
        assert!((r - 13107.0 / 262144.0).abs() < 1e-15);
        assert!(r < 0.05);
    }

    #[test]
    fn blend_examples() {
        let a = GrayImage::constant(4, 4, 0.0).unwrap();
        let b = GrayImage::constant(4, 4, 1.0).unwrap();
        let out = blend_weighted(&a, &b, 0.2, 0.8).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));

        let a = GrayImage::constant(4, 4, 0.4).unwrap();
        let b = GrayImage::constant(4, 4, 0.6).unwrap();
        let out = blend_weighted(&a, &b, 0.5, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn blend_rejects_bad_weights_and_dims() {
        let a = GrayImage::constant(4, 4, 0.5).unwrap();
        let b = GrayImage::constant(4, 5, 0.5).unwrap();
        assert!(matches!(
            blend_weighted(&a, &b, 0.5, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(blend_weighted(&a, &a, 0.6, 0.5).is_err());
        assert!(blend_weighted(&a, &a, 1.2, -0.2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn blend_commutes_under_swap(
                seed in proptest::collection::vec(0u8..=255, 16),
                wa in 0.0f64..=1.0
            ) {
                let a = GrayImage::new(4, 4, seed.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
                let b = a.invert();
                let wb = 1.0 - wa;
                let ab = blend_weighted(&a, &b, wa, wb).unwrap();
                let ba = blend_weighted(&b, &a, wb, wa).unwrap();
                for (x, y) in ab.data().iter().zip(ba.data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
                // Idempotent on equal inputs.
                let aa = blend_weighted(&a, &a, wa, wb).unwrap();
                for (x, y) in aa.data().iter().zip(a.data()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn white_ratio_complement(bits in proptest::collection::vec(0u8..=1, 25)) {
                let m = BinaryMask::new(5, 5, bits).unwrap();
                let r = white_ratio(&m);
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!((white_ratio(&m.complement()) - (1.0 - r)).abs() < 1e-15);
            }
        }
    }
}
