//! Conversion between `[3, H, W]` tensors in `[-1, 1]` and 8-bit PNG files.

use std::io::Cursor;
use std::path::Path;

use image::{imageops, ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(x: f64) -> u8 {
    (((x + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

pub fn to_rgb(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape { op: "to_rgb", expected: vec![3, 0, 0], actual: s.to_vec() });
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let k = y as usize * w + x as usize;
        Rgb([to_byte(d[k]), to_byte(d[h * w + k]), to_byte(d[2 * h * w + k])])
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |k| {
        let (c, rest) = (k / (h * w), k % (h * w));
        from_byte(img.get_pixel((rest % w) as u32, (rest / w) as u32).0[c])
    })
}

/// Round an image through 8-bit quantization, as saving and reloading would.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|x| from_byte(to_byte(x)))
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb(image)?.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    Ok(from_rgb(&image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8()))
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

/// Load any supported image file and resize it to `size x size`.
pub fn read_resized(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8();
    let resized = imageops::resize(&img, size as u32, size as u32, imageops::FilterType::Triangle);
    Ok(from_rgb(&resized))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let img = Tensor::from_fn(&[3, 5, 7], |k| ((k * 37) % 101) as f64 / 50.0 - 1.0);
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), [3, 5, 7]);
        assert_eq!(back, quantize(&img));
        assert!(back.max_abs_diff(&img) <= 1.0 / 255.0 + 1e-12);
        assert_eq!(quantize(&back), back);
    }

    #[test]
    fn extremes_map_to_byte_range() {
        let img = Tensor::new(vec![3, 1, 2], vec![-1.0, 1.0, -5.0, 5.0, 0.0, 0.0]).unwrap();
        let rgb = to_rgb(&img).unwrap();
        assert_eq!(rgb.get_pixel(0, 0).0, [0, 0, 128]);
        assert_eq!(rgb.get_pixel(1, 0).0, [255, 255, 128]);
        assert!(to_rgb(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
