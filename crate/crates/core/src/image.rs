//! Float RGB images in `[-1, 1]` and their lossless on-disk form.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{Rgb, Rgb32FImage, RgbImage};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Lower and upper bound of normalised pixel values.
pub const PIXEL_RANGE: (f64, f64) = (-1.0, 1.0);

/// Row-major RGB image with channel-interleaved `f64` samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("image must have positive size".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{}x{} RGB image needs {} samples, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
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

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn in_range(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && *v >= PIXEL_RANGE.0 && *v <= PIXEL_RANGE.1)
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(PIXEL_RANGE.0, PIXEL_RANGE.1);
        }
        self
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), &Device::Cpu)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?)
    }

    /// Stacks images of equal size into `(B, 3, H, W)`.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|im| im.to_tensor())
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// From a `(3, H, W)` tensor; values are clamped to the pixel range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(Self::new(w, h, data)?.clamped())
    }

    /// Sub-image `[x0, x0+w) × [y0, y0+h)`, clipped to the frame.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let x1 = (x0 + w).min(self.width);
        let y1 = (y0 + h).min(self.height);
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Shape("empty crop".into()));
        }
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
        for y in y0..y1 {
            let row = (y * self.width + x0) * 3..(y * self.width + x1) * 3;
            data.extend_from_slice(&self.data[row]);
        }
        Self::new(x1 - x0, y1 - y0, data)
    }

    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let buf = Rgb32FImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb([p[0] as f32, p[1] as f32, p[2] as f32])
        });
        let out = image::imageops::resize(
            &buf,
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        let data = out.pixels().flat_map(|p| p.0.map(f64::from)).collect();
        Ok(Self::new(width, height, data)?.clamped())
    }

    /// Bilinear sample at a continuous position; outside the frame the
    /// nearest edge pixel is used.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let xf = x.clamp(0.0, (self.width - 1) as f64);
        let yf = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (xf - x0 as f64, yf - y0 as f64);
        let (a, b, c, d) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - fx) + b[k] * fx;
            let bottom = c[k] * (1.0 - fx) + d[k] * fx;
            out[k] = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb(p.map(to_u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let data = img
            .pixels()
            .flat_map(|p| p.0.map(|v| v as f64 / 127.5 - 1.0))
            .collect();
        Self::new(img.width() as usize, img.height() as usize, data)
    }

    /// Quantises to 8 bits per channel; `load_png(save_png(x))` equals
    /// `x.quantized()`.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| to_u8(v) as f64 / 127.5 - 1.0)
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Self::from_rgb8(&img)
    }

    /// Hex SHA-256 of the PNG encoding; used as the content address.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.png_bytes()?)))
    }
}

fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        let data = (0..w * h)
            .flat_map(|i| {
                let x = (i % w) as f64 / w as f64;
                let y = (i / w) as f64 / h as f64;
                [x * 2.0 - 1.0, y * 2.0 - 1.0, 0.25]
            })
            .collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn tensor_round_trip() {
        let im = gradient(5, 4);
        let t = im.to_tensor().unwrap();
        assert_eq!(t.dims(), &[3, 4, 5]);
        assert_eq!(Image::from_tensor(&t).unwrap(), im);
    }

    #[test]
    fn png_round_trip_equals_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let im = gradient(7, 3);
        im.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), im.quantized());
    }

    #[test]
    fn crop_is_clipped_to_frame() {
        let im = gradient(8, 8);
        let c = im.crop(6, 6, 5, 5).unwrap();
        assert_eq!((c.width(), c.height()), (2, 2));
        assert_eq!(c.pixel(0, 0), im.pixel(6, 6));
        assert!(im.crop(8, 0, 1, 1).is_err());
    }

    #[test]
    fn rejects_wrong_sample_count() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
    }
}
