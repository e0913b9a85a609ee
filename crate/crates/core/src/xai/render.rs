use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use super::{SaliencyMap, Segmentation};
use crate::data::OctImage;
use crate::{Error, Result, CHANNELS, IMAGE_SIZE};

pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.4;

const YELLOW: [f32; 3] = [1.0, 1.0, 0.0];

/// Jet-like colormap: blue at 0, green mid-range, red at 1.
pub fn jet(x: f64) -> [f64; 3] {
    let x = x.clamp(0.0, 1.0);
    let f = |c: f64| (1.5 - (4.0 * x - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// The map alone, coloured, as interleaved RGB.
pub fn map_to_rgb(map: &SaliencyMap) -> Vec<f32> {
    map.values.iter().flat_map(|&v| jet(v).map(|c| c as f32)).collect()
}

/// `(1 − α)·grey(image) + α·jet(map)`, clipped to `[0, 1]`.
pub fn render_overlay(image: &OctImage, map: &SaliencyMap, alpha: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidXaiConfig(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    if map.values.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "map is {}x{}, image is {IMAGE_SIZE}x{IMAGE_SIZE}",
            map.height, map.width
        )));
    }
    let grey = image.luminance();
    let mut out = Vec::with_capacity(grey.len() * CHANNELS);
    for (&g, &m) in grey.iter().zip(&map.values) {
        for c in jet(m) {
            out.push(((1.0 - alpha) * g as f64 + alpha * c).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(out)
}

/// The image with the outline of the union of `selected` segments drawn in
/// yellow.
pub fn draw_segment_boundaries(image: &OctImage, seg: &Segmentation, selected: &[usize]) -> Vec<f32> {
    let mut chosen = vec![false; seg.count];
    for &s in selected {
        if s < seg.count {
            chosen[s] = true;
        }
    }
    let inside = |y: usize, x: usize| chosen[seg.label(y, x)];
    let mut out = image.pixels().to_vec();
    let (h, w) = (seg.height, seg.width);
    for y in 0..h {
        for x in 0..w {
            if !inside(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !inside(y - 1, x)
                || !inside(y + 1, x)
                || !inside(y, x - 1)
                || !inside(y, x + 1);
            if edge {
                let o = (y * w + x) * CHANNELS;
                out[o..o + CHANNELS].copy_from_slice(&YELLOW);
            }
        }
    }
    out
}

pub fn to_rgb_image(pixels: &[f32], width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let o = (y as usize * width + x as usize) * CHANNELS;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(pixels[o]), q(pixels[o + 1]), q(pixels[o + 2])])
    })
}

/// Three 224×224 RGB panels side by side.
pub fn three_panel(left: &[f32], middle: &[f32], right: &[f32]) -> RgbImage {
    let mut fig = RgbImage::new(3 * IMAGE_SIZE as u32, IMAGE_SIZE as u32);
    for (i, panel) in [left, middle, right].into_iter().enumerate() {
        let img = to_rgb_image(panel, IMAGE_SIZE, IMAGE_SIZE);
        image::imageops::replace(&mut fig, &img, (i * IMAGE_SIZE) as i64, 0);
    }
    fig
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(bytes.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xai::{superpixel_segment, Method};
    use crate::IMAGE_LEN;

    fn map(v: f64) -> SaliencyMap {
        SaliencyMap {
            method: Method::GradCam,
            target_class: 0,
            height: 224,
            width: 224,
            values: vec![v; 224 * 224],
        }
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn alpha_zero_is_greyscale() {
        let img = OctImage::new((0..IMAGE_LEN).map(|i| (i % 7) as f32 / 7.0).collect(), "x", (224, 224)).unwrap();
        let out = render_overlay(&img, &map(0.3), 0.0).unwrap();
        for (px, g) in out.chunks_exact(3).zip(img.luminance()) {
            assert!(px.iter().all(|&c| c == g));
        }
    }

    #[test]
    fn alpha_one_constant_map_is_one_colour() {
        let img = OctImage::new(vec![0.2; IMAGE_LEN], "x", (224, 224)).unwrap();
        let out = render_overlay(&img, &map(0.75), 1.0).unwrap();
        let c = jet(0.75).map(|v| v as f32);
        assert!(out.chunks_exact(3).all(|p| p == c));
        assert!(render_overlay(&img, &map(0.75), 1.5).is_err());
    }

    #[test]
    fn boundaries_and_panel_size() {
        let img = OctImage::new(vec![0.0; IMAGE_LEN], "x", (224, 224)).unwrap();
        let seg = superpixel_segment(&img, 4).unwrap();
        let drawn = draw_segment_boundaries(&img, &seg, &[0]);
        let px = |y: usize, x: usize| &drawn[(y * 224 + x) * 3..(y * 224 + x) * 3 + 3];
        assert_eq!(px(0, 50), &YELLOW);
        assert_eq!(px(111, 50), &YELLOW);
        assert_eq!(px(50, 50), &[0.0, 0.0, 0.0]);
        assert_eq!(px(150, 150), &[0.0, 0.0, 0.0]);
        let fig = three_panel(img.pixels(), &drawn, img.pixels());
        assert_eq!(fig.dimensions(), (672, 224));
        assert!(encode_png(&fig).unwrap().starts_with(b"\x89PNG"));
    }
}
