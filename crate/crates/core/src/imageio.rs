//! PNG transport and the canonical pixel digest behind image URIs.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("png decode failed: {0}")]
    Decode(#[from] image::ImageError),
    #[error("base64 decode failed: {0}")]
    Base64(#[from] base64::DecodeError),
}

/// Hex sha256 over `"RGB8" || width_be || height_be || pixels`. PNG bytes
/// are not hashed because encoders may differ while pixels do not.
pub fn pixel_digest(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(b"RGB8");
    h.update(img.width().to_be_bytes());
    h.update(img.height().to_be_bytes());
    h.update(img.as_raw());
    hex::encode(h.finalize())
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encoding does not fail");
    out.into_inner()
}

pub fn encode_gray_png(img: &GrayImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encoding does not fail");
    out.into_inner()
}

/// Decodes any PNG and converts it to 8-bit RGB.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, ImageIoError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn decode_gray_png(bytes: &[u8]) -> Result<GrayImage, ImageIoError> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8())
}

pub fn png_base64(img: &RgbImage) -> String {
    B64.encode(encode_png(img))
}

pub fn gray_png_base64(img: &GrayImage) -> String {
    B64.encode(encode_gray_png(img))
}

pub fn png_from_base64(s: &str) -> Result<RgbImage, ImageIoError> {
    decode_png(&B64.decode(s)?)
}

pub fn gray_png_from_base64(s: &str) -> Result<GrayImage, ImageIoError> {
    decode_gray_png(&B64.decode(s)?)
}

/// Lifts a gray image to RGB, mostly for tests.
pub fn gray_to_rgb(img: &GrayImage) -> RgbImage {
    DynamicImage::ImageLuma8(img.clone()).to_rgb8()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let img = RgbImage::from_fn(19, 7, |x, y| image::Rgb([x as u8 * 13, y as u8 * 31, 200]));
        let back = decode_png(&encode_png(&img)).unwrap();
        assert_eq!(back, img);
        assert_eq!(png_from_base64(&png_base64(&img)).unwrap(), img);
        assert_eq!(pixel_digest(&back), pixel_digest(&img));
    }

    #[test]
    fn digest_depends_on_shape_and_pixels() {
        let a = RgbImage::new(4, 6);
        let b = RgbImage::new(6, 4);
        assert_ne!(pixel_digest(&a), pixel_digest(&b));
        let mut c = a.clone();
        c.put_pixel(0, 0, image::Rgb([0, 0, 1]));
        assert_ne!(pixel_digest(&a), pixel_digest(&c));
        assert_eq!(pixel_digest(&a).len(), 64);
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(decode_png(b"not a png").is_err());
        assert!(png_from_base64("@@@").is_err());
    }
}
