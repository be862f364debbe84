//! Pixel array type shared by the renderer, the dataset files and the
//! encoders. Values live in [0, 1], stored row-major, channel-last.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(
                "image_new",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        Ok(Image { height, width, channels, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&self, factor: f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn in_range01(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Per-pixel difference `self - other`, clamped to [0, 1].
    pub fn sub_clamped(&self, other: &Image) -> Result<Image> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels)
        {
            return Err(Error::dim("image_sub", "shape mismatch"));
        }
        let data =
            self.data.iter().zip(&other.data).map(|(a, b)| (a - b).clamp(0.0, 1.0)).collect();
        Ok(Image { height: self.height, width: self.width, channels: self.channels, data })
    }

    /// Channel-wise concatenation (`self` first).
    pub fn concat_channels(&self, other: &Image) -> Result<Image> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim("image_concat", "spatial mismatch"));
        }
        let channels = self.channels + other.channels;
        let mut out = Image::zeros(self.height, self.width, channels);
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..self.channels {
                    out.set(r, c, ch, self.get(r, c, ch));
                }
                for ch in 0..other.channels {
                    out.set(r, c, self.channels + ch, other.get(r, c, ch));
                }
            }
        }
        Ok(out)
    }

    /// Area-average downsampling by integer factors.
    pub fn downsample_area(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 || self.height % out_h != 0 || self.width % out_w != 0 {
            return Err(Error::dim(
                "downsample_area",
                format!(
                    "{}x{} -> {out_h}x{out_w} is not an integer factor",
                    self.height, self.width
                ),
            ));
        }
        let fh = self.height / out_h;
        let fw = self.width / out_w;
        let norm = (fh * fw) as f64;
        let mut out = Image::zeros(out_h, out_w, self.channels);
        for r in 0..out_h {
            for c in 0..out_w {
                for ch in 0..self.channels {
                    let mut acc = 0.0;
                    for dr in 0..fh {
                        for dc in 0..fw {
                            acc += self.get(r * fh + dr, c * fw + dc, ch);
                        }
                    }
                    out.set(r, c, ch, acc / norm);
                }
            }
        }
        Ok(out)
    }

    /// 8-bit quantization used by the episode files.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Image> {
        let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Image::new(height, width, channels, data)
    }
}
