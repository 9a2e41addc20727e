//! Guided filtering of a latent against its ridge mask, plus the final
//! weighted blend.
//!
//! The filter computes a local linear model `q = mean_a * I + mean_b` from
//! window statistics of the latent `I` and the guidance mask `p`:
//!
//! ```text
//! a = cov_Ip / (var_I + eps),    b = mean_p - a * mean_I
//! ```
//!
//! All plane means are full-size `(2r+1) x (2r+1)` windows with
//! edge-replicated borders, evaluated in O(N) through an integral image.

use serde::{Deserialize, Serialize};

use crate::imagecore::{blend_weighted, BinaryMask, GrayImage};
use crate::{Error, Result};

/// Radius, regularization, and final-blend weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidedFilterParams {
    /// Window radius in pixels.
    pub r: usize,
    /// Regularization added to the windowed variance.
    pub eps: f64,
    /// Final-blend weight for the latent image.
    pub w_latent: f64,
    /// Final-blend weight for the guided-filtered image.
    pub w_guided: f64,
}

impl Default for GuidedFilterParams {
    fn default() -> Self {
        Self {
            r: 5,
            eps: 1e-6,
            w_latent: 0.2,
            w_guided: 0.8,
        }
    }
}

impl GuidedFilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::InvalidParam("guided filter radius must be >= 1".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidParam("guided filter eps must be > 0".into()));
        }
        if (self.w_latent + self.w_guided - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "blend weights sum to {} (expected 1)",
                self.w_latent + self.w_guided
            )));
        }
        Ok(())
    }
}

/// Every intermediate plane of the filter, kept for inspection and tests.
#[derive(Debug, Clone)]
pub struct GuidedFilterTrace {
    pub width: usize,
    pub height: usize,
    pub mean_i: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub cov_ip: Vec<f64>,
    pub var_i: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub mean_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    /// Number of output pixels that fell outside [0, 1] before the clamp.
    pub clamped: usize,
}

/// Mean over the `(2r+1) x (2r+1)` window around each pixel.
///
/// Borders are edge-replicated so every window is full-size; the sums come
/// from one integral-image pass over the padded plane.
pub fn box_mean(data: &[f64], width: usize, height: usize, r: usize) -> Vec<f64> {
    assert!(r >= 1, "box_mean radius must be >= 1");
    assert_eq!(data.len(), width * height);
    let pw = width + 2 * r;
    let ph = height + 2 * r;

    // integral[(y+1)*(pw+1) + (x+1)] = sum of padded plane over [0..=y, 0..=x]
    let mut integral = vec![0.0f64; (pw + 1) * (ph + 1)];
    for py in 0..ph {
        let src_y = (py as i64 - r as i64).clamp(0, height as i64 - 1) as usize;
        let row = &data[src_y * width..(src_y + 1) * width];
        let mut run = 0.0f64;
        for px in 0..pw {
            let src_x = (px as i64 - r as i64).clamp(0, width as i64 - 1) as usize;
            run += row[src_x];
            integral[(py + 1) * (pw + 1) + (px + 1)] = integral[py * (pw + 1) + (px + 1)] + run;
        }
    }

    let side = 2 * r + 1;
    let norm = 1.0 / (side * side) as f64;
    let mut out = vec![0.0f64; width * height];
    for y in 0..height {
        let y0 = y; // padded window rows [y, y + side)
        let y1 = y + side;
        for x in 0..width {
            let x0 = x;
            let x1 = x + side;
            let sum = integral[y1 * (pw + 1) + x1] - integral[y0 * (pw + 1) + x1]
                - integral[y1 * (pw + 1) + x0]
                + integral[y0 * (pw + 1) + x0];
            out[y * width + x] = sum * norm;
        }
    }
    out
}

/// Guided filter of latent `I` with guidance mask `p` (Eq. `q = a*I + b`).
///
/// Returns the filtered image (clamped to `[0, 1]`) and the full trace of
/// intermediate planes.
pub fn guided_filter(
    latent: &GrayImage,
    guidance: &BinaryMask,
    params: &GuidedFilterParams,
) -> Result<(GrayImage, GuidedFilterTrace)> {
    params.validate()?;
    if latent.width() != guidance.width() || latent.height() != guidance.height() {
        return Err(Error::DimensionMismatch {
            expected_w: latent.width(),
            expected_h: latent.height(),
            got_w: guidance.width(),
            got_h: guidance.height(),
        });
    }
    let (w, h, r) = (latent.width(), latent.height(), params.r);
    let i_plane = latent.data();
    let p_plane: Vec<f64> = guidance.data().iter().map(|&v| v as f64).collect();

    let mean_i = box_mean(i_plane, w, h, r);
    let mean_p = box_mean(&p_plane, w, h, r);

    let ip: Vec<f64> = i_plane.iter().zip(&p_plane).map(|(a, b)| a * b).collect();
    let ii: Vec<f64> = i_plane.iter().map(|a| a * a).collect();
    let mean_ip = box_mean(&ip, w, h, r);
    let mean_ii = box_mean(&ii, w, h, r);

    let n = w * h;
    let mut cov_ip = vec![0.0; n];
    let mut var_i = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for k in 0..n {
        cov_ip[k] = mean_ip[k] - mean_i[k] * mean_p[k];
        // E[X^2] - E[X]^2 can come out at -1e-17 from cancellation; clamp.
        var_i[k] = (mean_ii[k] - mean_i[k] * mean_i[k]).max(0.0);
        a[k] = cov_ip[k] / (var_i[k] + params.eps);
        b[k] = mean_p[k] - a[k] * mean_i[k];
    }

    let mean_a = box_mean(&a, w, h, r);
    let mean_b = box_mean(&b, w, h, r);

    let mut q = vec![0.0; n];
    let mut clamped = 0usize;
    for k in 0..n {
        let v = mean_a[k] * i_plane[k] + mean_b[k];
        if !(0.0..=1.0).contains(&v) {
            clamped += 1;
        }
        q[k] = v.clamp(0.0, 1.0);
    }

    let trace = GuidedFilterTrace {
        width: w,
        height: h,
        mean_i,
        mean_p,
        cov_ip,
        var_i,
        a,
        b,
        mean_a,
        mean_b,
        clamped,
    };
    Ok((GrayImage::from_raw(w, h, q), trace))
}

/// Full enhancement: guided-filter the latent against the ridge mask, then
/// blend the result back over the latent (defaults 0.2 latent / 0.8 guided).
pub fn enhance_latent(
    latent: &GrayImage,
    ridge_mask: &BinaryMask,
    params: &GuidedFilterParams,
) -> Result<GrayImage> {
    let (q, _) = guided_filter(latent, ridge_mask, params)?;
    blend_weighted(latent, &q, params.w_latent, params.w_guided)
}
