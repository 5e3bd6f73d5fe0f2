//! Perceptual distance providers for the masked background.
//!
//! The bundled fallback is a gradient-magnitude similarity distance. It is
//! reported as `NOT-LPIPS` and exists for drift-trend comparisons only.

use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::metrics::luma;
use super::EvalError;
use crate::imageio::{gray_png_base64, png_base64};
use crate::mask::BitMask;

pub const FALLBACK_NAME: &str = "NOT-LPIPS (gradient-magnitude similarity)";

/// Stabiliser for the similarity ratio, in squared byte units.
const GMS_C: f64 = 170.0;

pub trait PerceptualProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Distance between `pre` and `post` over `mask`; 0 means identical.
    fn score(&self, pre: &RgbImage, post: &RgbImage, mask: &BitMask) -> Result<f64, EvalError>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GmsFallback;

fn gradient_magnitude(g: &[f64], w: usize, x: usize, y: usize) -> f64 {
    let at = |dx: usize, dy: usize| g[(y + dy - 1) * w + x + dx - 1];
    let gx = (at(2, 0) + at(2, 1) + at(2, 2) - at(0, 0) - at(0, 1) - at(0, 2)) / 3.0;
    let gy = (at(0, 2) + at(1, 2) + at(2, 2) - at(0, 0) - at(1, 0) - at(2, 0)) / 3.0;
    (gx * gx + gy * gy).sqrt()
}

impl PerceptualProvider for GmsFallback {
    fn name(&self) -> &str {
        FALLBACK_NAME
    }

    /// Mean of `1 − GMS` over pixels whose 3x3 Prewitt support lies in `mask`.
    fn score(&self, pre: &RgbImage, post: &RgbImage, mask: &BitMask) -> Result<f64, EvalError> {
        if pre.dimensions() != post.dimensions() || mask.dimensions() != pre.dimensions() {
            return Err(EvalError::DimensionMismatch {
                left: pre.dimensions(),
                right: post.dimensions(),
            });
        }
        if mask.is_empty() {
            return Err(EvalError::EmptyMask);
        }
        let support = mask.erode(1);
        if support.is_empty() {
            return Err(EvalError::MaskTooThin);
        }
        let w = pre.width() as usize;
        let (ga, gb) = (luma(pre), luma(post));
        let (mut sum, mut n) = (0.0, 0u64);
        for (x, y) in support.iter_ones() {
            let (a, b) = (
                gradient_magnitude(&ga, w, x as usize, y as usize),
                gradient_magnitude(&gb, w, x as usize, y as usize),
            );
            sum += 1.0 - (2.0 * a * b + GMS_C) / (a * a + b * b + GMS_C);
            n += 1;
        }
        Ok(sum / n as f64)
    }
}

/// Remote metric: `POST {pre_png_base64, post_png_base64, mask_png_base64}`
/// answered by `{score}`.
pub struct HttpPerceptual {
    url: String,
    name: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireRequest {
    pre_png_base64: String,
    post_png_base64: String,
    mask_png_base64: String,
}

#[derive(Deserialize)]
struct WireResponse {
    score: f64,
}

impl HttpPerceptual {
    pub fn new(url: impl Into<String>, timeout_ms: u64) -> HttpPerceptual {
        let url = url.into();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpPerceptual {
            name: format!("remote ({url})"),
            url,
            agent,
        }
    }
}

impl PerceptualProvider for HttpPerceptual {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, pre: &RgbImage, post: &RgbImage, mask: &BitMask) -> Result<f64, EvalError> {
        let body = WireRequest {
            pre_png_base64: png_base64(pre),
            post_png_base64: png_base64(post),
            mask_png_base64: gray_png_base64(&mask.to_gray_image()),
        };
        let unavailable = |m: String| EvalError::ProviderUnavailable(m);
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(unavailable(format!("status {status}")));
        }
        let wire: WireResponse = resp
            .body_mut()
            .with_config()
            .limit(1 << 20)
            .read_json()
            .map_err(|e| unavailable(e.to_string()))?;
        if !wire.score.is_finite() {
            return Err(unavailable("non-finite score".into()));
        }
        Ok(wire.score)
    }
}
