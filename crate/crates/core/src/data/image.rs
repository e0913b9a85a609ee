use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::{Error, Result, CHANNELS, IMAGE_LEN, IMAGE_SIZE};

/// A preprocessed 224×224×3 image with values in `[0, 1]`, stored
/// interleaved (`y`, `x`, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct OctImage {
    pixels: Vec<f32>,
    source_path: String,
    original_size: (u32, u32),
}

impl OctImage {
    /// Validates shape and range. `original_size` is `(width, height)`.
    pub fn new(pixels: Vec<f32>, source_path: impl Into<String>, original_size: (u32, u32)) -> Result<OctImage> {
        if pixels.len() != IMAGE_LEN {
            return Err(Error::ShapeMismatch(format!(
                "image must have {IMAGE_LEN} values (224x224x3), got {}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(OctImage {
            pixels,
            source_path: source_path.into(),
            original_size,
        })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn original_size(&self) -> (u32, u32) {
        self.original_size
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * IMAGE_SIZE + x) * CHANNELS + c]
    }

    /// Luminance (ITU-R 601 weights), one value per pixel.
    pub fn luminance(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(CHANNELS)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect()
    }
}

/// Decodes, converts to RGB, scales by the source bit depth and resizes
/// bilinearly to 224×224.
pub fn load_image(path: impl AsRef<Path>) -> Result<OctImage> {
    let path = path.as_ref();
    let decode_err = |reason: String| Error::DecodeError {
        path: path.display().to_string(),
        reason,
    };
    let img = ImageReader::open(path)
        .map_err(|e| decode_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    preprocess(img, path.display().to_string())
}

/// Same as [`load_image`] for an in-memory encoded file.
pub fn decode_image_bytes(bytes: &[u8], source: &str) -> Result<OctImage> {
    let decode_err = |reason: String| Error::DecodeError {
        path: source.to_string(),
        reason,
    };
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    preprocess(img, source.to_string())
}

fn preprocess(img: DynamicImage, source: String) -> Result<OctImage> {
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Err(Error::DecodeError {
            path: source,
            reason: "empty image".into(),
        });
    }
    // to_rgb32f replicates grey channels and divides by the type's maximum
    let rgb = img.to_rgb32f();
    let src: Vec<f64> = rgb.as_raw().iter().map(|&v| v as f64).collect();
    let resized = resize_bilinear(&src, h as usize, w as usize, CHANNELS, IMAGE_SIZE, IMAGE_SIZE);
    let pixels = resized.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect();
    OctImage::new(pixels, source, (w, h))
}

/// Bilinear resampling of an interleaved `h×w×channels` buffer with
/// half-pixel centres and edge clamping (no antialiasing).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, channels: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w * channels);
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = vec![0.0; out_h * out_w * channels];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * w + x) * channels + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_w + ox) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

    #[test]
    fn grayscale_scan_is_resized_and_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.png");
        let img = GrayImage::from_fn(512, 496, |x, y| Luma([((x * 7 + y * 3) % 256) as u8]));
        img.save(&path).unwrap();
        let oct = load_image(&path).unwrap();
        assert_eq!(oct.pixels().len(), 224 * 224 * 3);
        assert_eq!(oct.original_size(), (512, 496));
        assert!(oct.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        for px in oct.pixels().chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn saturated_rgb_is_exactly_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        RgbImage::from_pixel(224, 224, Rgb([255, 255, 255])).save(&path).unwrap();
        let oct = load_image(&path).unwrap();
        assert!(oct.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sixteen_bit_uses_its_own_maximum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_pixel(100, 80, Luma([65535u16]));
        img.save(&path).unwrap();
        let oct = load_image(&path).unwrap();
        assert!(oct.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        RgbImage::from_pixel(64, 64, Rgb([10, 20, 30])).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&path), Err(Error::DecodeError { .. })));
        assert!(matches!(
            decode_image_bytes(b"plain text, not an image", "upload"),
            Err(Error::DecodeError { .. })
        ));
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        RgbImage::from_fn(300, 170, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7])).save(&path).unwrap();
        assert_eq!(load_image(&path).unwrap(), load_image(&path).unwrap());
    }

    #[test]
    fn bilinear_preserves_constants_and_linear_ramps() {
        let src = vec![0.25; 7 * 5];
        assert!(resize_bilinear(&src, 7, 5, 1, 13, 11).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // upsampling a 2-pixel ramp by 2 gives the half-pixel interpolants
        let out = resize_bilinear(&[0.0, 1.0], 1, 2, 1, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let mut px = vec![0.5; IMAGE_LEN];
        px[10] = 1.5;
        assert!(OctImage::new(px, "x", (1, 1)).is_err());
        assert!(OctImage::new(vec![0.5; 12], "x", (1, 1)).is_err());
        let mut nan = vec![0.5; IMAGE_LEN];
        nan[3] = f32::NAN;
        assert!(OctImage::new(nan, "x", (1, 1)).is_err());
    }
}
