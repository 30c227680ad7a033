//! Planar RGB images in `[0, 1]` and 8-bit PNG IO.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use autodiff::Tensor;

use crate::error::{shape_err, Error, Result};

/// Planar `[3, H, W]` RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(shape_err!(
                "image {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let n = self.width * self.height;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + y * self.width + x] = v;
        }
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone()).expect("image tensor")
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(shape_err!("cannot view tensor {s:?} as an RGB image")),
        };
        Self::new(w, h, t.data().to_vec())
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(shape_err!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width,
                self.height
            ));
        }
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in y0..y0 + h {
                let base = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[base + x0..base + x0 + w]);
            }
        }
        Image::new(w, h, data)
    }

    /// Writes `patch` with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, patch: &Image, x0: usize, y0: usize) -> Result<()> {
        if x0 + patch.width > self.width || y0 + patch.height > self.height {
            return Err(shape_err!("paste outside image bounds"));
        }
        for c in 0..3 {
            for y in 0..patch.height {
                let dst = (c * self.height + y0 + y) * self.width + x0;
                let src = (c * patch.height + y) * patch.width;
                self.data[dst..dst + patch.width]
                    .copy_from_slice(&patch.data[src..src + patch.width]);
            }
        }
        Ok(())
    }

    /// Pads right/bottom by edge replication up to multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Image {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if w == self.width && h == self.height {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in 0..h {
                let sy = y.min(self.height - 1);
                for x in 0..w {
                    data.push(self.get(c, sy, x.min(self.width - 1)));
                }
            }
        }
        Image {
            width: w,
            height: h,
            data,
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Horizontal concatenation of equally tall images.
    pub fn hstack(images: &[&Image]) -> Result<Image> {
        let h = images.first().map(|i| i.height).unwrap_or(0);
        if images.iter().any(|i| i.height != h) {
            return Err(shape_err!("hstack needs equal heights"));
        }
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut out = Image::filled(w, h, [0.0; 3]);
        let mut x0 = 0;
        for img in images {
            out.paste(img, x0, 0)?;
            x0 += img.width;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let img_err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(img_err)?;
        writer.write_image_data(&self.to_rgb8()).map_err(img_err)?;
        writer.finish().map_err(img_err)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let img_err = |msg: String| Error::Image {
            path: path.to_path_buf(),
            msg,
        };
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| img_err("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| img_err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(img_err(format!("unsupported color type {other:?}"))),
        };
        let mut data = vec![0.0f32; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let px = &buf[(y * w + x) * channels..];
                for c in 0..3 {
                    let v = if channels >= 3 { px[c] } else { px[0] };
                    data[(c * h + y) * w + x] = v as f32 / 255.0;
                }
            }
        }
        Image::new(w, h, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push((self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

/// Stacks equally sized images into `[N, 3, H, W]`.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| shape_err!("empty image batch"))?;
    if images.iter().any(|i| !i.same_size(first)) {
        return Err(shape_err!("image batch has mixed sizes"));
    }
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(
        &[images.len(), 3, first.height, first.width],
        data,
    )?)
}

/// Splits `[N, 3, H, W]` into images.
pub fn unbatch(t: &Tensor<f32>) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(shape_err!("expected [N, 3, H, W], got {s:?}"));
    }
    let per = 3 * s[2] * s[3];
    t.data()
        .chunks(per)
        .map(|c| Image::new(s[3], s[2], c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..3 * w * h).map(|i| (i % 251) as f32 / 250.0).collect();
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn crop_paste_roundtrip() {
        let img = ramp(10, 7);
        let c = img.crop(3, 2, 4, 5).unwrap();
        assert_eq!(c.get(1, 0, 0), img.get(1, 2, 3));
        let mut blank = Image::filled(10, 7, [0.0; 3]);
        blank.paste(&c, 3, 2).unwrap();
        assert_eq!(blank.crop(3, 2, 4, 5).unwrap(), c);
        assert!(img.crop(8, 0, 4, 1).is_err());
    }

    #[test]
    fn pad_replicates_edges() {
        let img = ramp(5, 3);
        let p = img.pad_to_multiple(4);
        assert_eq!((p.width(), p.height()), (8, 4));
        assert_eq!(p.get(2, 3, 7), img.get(2, 2, 4));
        assert_eq!(p.crop(0, 0, 5, 3).unwrap(), img);
    }

    #[test]
    fn png_roundtrip_quantizes_to_8_bits() {
        let img = ramp(6, 4);
        let dir = std::env::temp_dir().join(format!("nr-png-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!((back.width(), back.height()), (6, 4));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
