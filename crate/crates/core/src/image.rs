//! Height x width x channels images with `f64` samples in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use boxprompt_autograd::Tensor;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// `[height, width, channels]` tensor.
    pub fn to_hwc(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.channels], self.data.clone())
    }

    /// `[channels, height, width]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::new(&[c, h, w], out)
    }

    /// Zero-pads on the bottom and right so both sides are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Image {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Image::zeros(h, w, self.channels);
        for y in 0..self.height {
            let src = &self.data[y * self.width * self.channels..(y + 1) * self.width * self.channels];
            out.data[y * w * self.channels..y * w * self.channels + src.len()].copy_from_slice(src);
        }
        out
    }

    /// Shifts content by integer offsets, filling uncovered pixels with `fill`.
    pub fn translate(&self, dx: isize, dy: isize, fill: f64) -> Image {
        let mut out = Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: vec![fill; self.data.len()],
        };
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let (sy, sx) = (y - dy, x - dx);
                if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
                    continue;
                }
                for c in 0..self.channels {
                    out.set(y as usize, x as usize, c, self.get(sy as usize, sx as usize, c));
                }
            }
        }
        out
    }

    /// Decodes PNG/other supported bytes into a 3-channel image.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let dynimg = image::load_from_memory(bytes)?;
        Ok(Self::from_rgb8(&dynimg.to_rgb8()))
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Image {
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data,
        }
    }

    /// 8-bit RGB rendering; single-channel images are replicated.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut buf = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let ch = c.min(self.channels - 1);
                    let v = (self.get(y, x, ch).clamp(0.0, 1.0) * 255.0).round() as u8;
                    buf.push(v);
                }
            }
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer sized to image")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Image quantized through an 8-bit round trip, matching what a PNG stores.
    pub fn quantized(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..self.clone()
        }
    }
}
