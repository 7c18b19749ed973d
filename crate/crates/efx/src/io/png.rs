//! PNG import/export for single frames, for human-viewable input/output.

use std::path::Path;

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Loads a PNG as a `(3, H, W)` tensor in `[0, 1]` (alpha discarded).
pub fn read_png<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let img = image::open(path)
        .map_err(|e| Error::Config(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![E::from_f64(0.0); 3 * h * w];
    for (x, y, pixel) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = E::from_f64(pixel.0[c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `(3, H, W)` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_png<E: Element>(path: &Path, frame: &Tensor<E>) -> Result<()> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::contract(
            "write_png",
            format!("want a (3, H, W) frame, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            let v = Element::to_f64(frame.data()[c * h * w + y * w + x]).clamp(0.0, 1.0);
            pixel.0[c] = (v * 255.0).round() as u8;
        }
    }
    img.save(path)
        .map_err(|e| Error::Config(format!("cannot write image {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let (h, w) = (5, 7);
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for i in 0..h * w {
                data.push(((i * 7 + c * 31) % 256) as f32 / 255.0);
            }
        }
        let frame = Tensor::<f32>::new(vec![3, h, w], data).unwrap();
        let dir = std::env::temp_dir().join("efx_png_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("frame.png");
        write_png(&path, &frame).unwrap();
        let back = read_png::<f32>(&path).unwrap();
        assert_eq!(back.shape(), frame.shape());
        for (a, b) in frame.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0, "{a} vs {b}");
        }
        assert!(write_png(&path, &Tensor::<f32>::full(vec![1, 4, 4], 0.5)).is_err());
    }
}
