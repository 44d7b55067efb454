//! 8-bit RGB and 16-bit depth PNG files.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes interleaved RGB values in `[0, 1]` as an 8-bit PNG.
pub fn save_rgb(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<(), ImageError> {
    assert_eq!(rgb.len(), width * height * 3);
    let buf: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, buf).unwrap();
    img.save(path).map_err(|source| ImageError::Codec {
        path: path.display().to_string(),
        source,
    })
}

/// Writes depth as 16-bit grayscale, `value = round(depth * scale)`.
pub fn save_depth16(path: &Path, depth: &[f64], width: usize, height: usize, scale: f64) -> Result<(), ImageError> {
    assert_eq!(depth.len(), width * height);
    let buf: Vec<u16> = depth
        .iter()
        .map(|&d| (d * scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, buf).unwrap();
    img.save(path).map_err(|source| ImageError::Codec {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an image as interleaved RGB in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize), ImageError> {
    let img = image::open(path)
        .map_err(|source| ImageError::Codec {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok((
        img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        w as usize,
        h as usize,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let rgb: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 17.0).collect();
        save_rgb(&p, &rgb, 3, 2).unwrap();
        let (back, w, h) = load_rgb(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in rgb.iter().zip(back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn depth_png_is_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        save_depth16(&p, &[0.0, 1.0, 2.5, 70.0], 2, 2, 1000.0).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!(img.color(), image::ColorType::L16);
        assert_eq!(img.to_luma16().into_raw(), vec![0, 1000, 2500, 65535]);
    }
}
