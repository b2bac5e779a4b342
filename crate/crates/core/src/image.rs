//! RGB image tensors and PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::{s, Array3, ArrayView3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An `H × W × 3` RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

/// 32-byte content hash of an image's pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContentHash(pub [u8; 32]);

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.ndim() != 3 || data.shape()[2] != 3 {
            return Err(Error::dim(format!(
                "image must be H x W x 3, got {:?}",
                data.shape()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("image contains non-finite values"));
        }
        Ok(Self {
            data: data.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c].clamp(0.0, 1.0));
        Self { data }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c).clamp(0.0, 1.0));
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_square(&self) -> bool {
        self.height() == self.width()
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    pub fn content_hash(&self) -> ContentHash {
        let mut hasher = Sha256::new();
        hasher.update((self.height() as u64).to_le_bytes());
        hasher.update((self.width() as u64).to_le_bytes());
        for v in self.data.iter() {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(digest.as_slice());
        ContentHash(out)
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::dim(format!(
                "cannot compare images of shape {:?} and {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    /// Bilinear (triangle filter) resize to `height × width`.
    pub fn resized(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let buf = image::Rgb32FImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                self.data[[y, x, 0]] as f32,
                self.data[[y, x, 1]] as f32,
                self.data[[y, x, 2]] as f32,
            ])
        });
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        ImageTensor::from_fn(height, width, |y, x, c| {
            out.get_pixel(x as u32, y as u32)[c] as f64
        })
    }

    /// Quantize to 8-bit RGB, row-major interleaved.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "expected {} bytes for a {height}x{width} RGB image, got {}",
                height * width * 3,
                bytes.len()
            )));
        }
        let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            bytes[(y * width + x) * 3 + c] as f64 / 255.0
        });
        Ok(Self { data })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::ImageRead {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    /// Write an 8-bit PNG; `text` entries are stored as tEXt chunks.
    pub fn save_png(&self, path: &Path, text: &[(&str, String)]) -> Result<()> {
        let file = File::create(path)?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width() as u32, self.height() as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        for (key, value) in text {
            encoder.add_text_chunk(key.to_string(), value.clone())?;
        }
        let mut writer = encoder.write_header()?;
        writer.write_image_data(&self.to_rgb8())?;
        writer.finish()?;
        Ok(())
    }

    /// A shaded disc on a white background, tinted by `variant`. Handy as a
    /// front image when no photo is at hand.
    pub fn synthetic_object(side: usize, variant: u64) -> ImageTensor {
        let tint = [
            0.25 + 0.5 * ((variant % 3) as f64 / 2.0),
            0.35 + 0.4 * ((variant / 3 % 3) as f64 / 2.0),
            0.8 - 0.5 * ((variant / 9 % 3) as f64 / 2.0),
        ];
        let s = side as f64;
        ImageTensor::from_fn(side, side, |y, x, c| {
            let u = (x as f64 + 0.5) / s * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / s * 2.0 - 1.0;
            let r2 = u * u + v * v;
            if r2 > 0.55 {
                1.0
            } else {
                let shade = 0.6 + 0.4 * (1.0 - r2 / 0.55).sqrt() - 0.15 * u;
                (tint[c] * shade).clamp(0.0, 1.0)
            }
        })
    }

    /// Tile equally sized images into a `rows × cols` grid.
    pub fn grid(images: &[ImageTensor], rows: usize, cols: usize) -> Result<ImageTensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::dim("cannot build a grid from zero images"))?;
        let (h, w) = (first.height(), first.width());
        if images.len() != rows * cols || images.iter().any(|im| im.height() != h || im.width() != w) {
            return Err(Error::dim("grid images must match the grid size and share one shape"));
        }
        let mut data = Array3::zeros((rows * h, cols * w, 3));
        for (i, im) in images.iter().enumerate() {
            let (r, c) = (i / cols, i % cols);
            data.slice_mut(s![r * h..(r + 1) * h, c * w..(c + 1) * w, ..])
                .assign(&im.data);
        }
        Ok(ImageTensor { data })
    }
}
