//! Planar RGB images, resampling, rasterization primitives and PNG IO.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Three-channel image stored channel-major (`[3, height, width]`), values
/// in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; CHANNELS * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for c in 0..CHANNELS {
            img.plane_mut(c).fill(rgb[c]);
        }
        img
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    fn blend(&mut self, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
        let n = self.width * self.height;
        let i = y * self.width + x;
        for (c, &v) in rgb.iter().enumerate() {
            let p = &mut self.data[c * n + i];
            *p = *p * (1.0 - alpha) + v * alpha;
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers on
    /// integers); zero outside the image.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let at = |xi: isize, yi: isize| -> f32 {
            if xi < 0 || yi < 0 || xi >= self.width as isize || yi >= self.height as isize {
                0.0
            } else {
                self.get(c, xi as usize, yi as usize)
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Center-aligned bilinear resize.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for c in 0..CHANNELS {
            for y in 0..height {
                let src_y = (y as f64 + 0.5) * sy - 0.5;
                for x in 0..width {
                    let src_x = (x as f64 + 0.5) * sx - 0.5;
                    let v = self.sample_clamped(c, src_x, src_y);
                    out.data[(c * height + y) * width + x] = v;
                }
            }
        }
        out
    }

    fn sample_clamped(&self, c: usize, x: f64, y: f64) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.sample(c, x, y)
    }

    /// Anti-aliased thick segment: coverage falls off linearly over one pixel
    /// at the stroke boundary.
    pub fn stroke(&mut self, a: [f64; 2], b: [f64; 2], radius: f64, rgb: [f32; 3]) {
        let (minx, maxx) = (a[0].min(b[0]) - radius - 1.0, a[0].max(b[0]) + radius + 1.0);
        let (miny, maxy) = (a[1].min(b[1]) - radius - 1.0, a[1].max(b[1]) + radius + 1.0);
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let len2 = dx * dx + dy * dy;
        for y in clamp_range(miny, maxy, self.height) {
            for x in clamp_range(minx, maxx, self.width) {
                let (px, py) = (x as f64, y as f64);
                let t = if len2 > 0.0 {
                    (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let cx = a[0] + t * dx;
                let cy = a[1] + t * dy;
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
                if cover > 0.0 {
                    self.blend(x, y, rgb, cover);
                }
            }
        }
    }

    /// Anti-aliased filled disk.
    pub fn disk(&mut self, center: [f64; 2], radius: f64, rgb: [f32; 3]) {
        self.stroke(center, center, radius, rgb);
    }

    /// Filled disk whose color is modulated per pixel by `texture(x, y)`.
    pub fn textured_disk(&mut self, center: [f64; 2], radius: f64, texture: impl Fn(usize, usize) -> [f32; 3]) {
        for y in clamp_range(center[1] - radius - 1.0, center[1] + radius + 1.0, self.height) {
            for x in clamp_range(center[0] - radius - 1.0, center[0] + radius + 1.0, self.width) {
                let d = ((x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2)).sqrt();
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
                if cover > 0.0 {
                    self.blend(x, y, texture(x, y), cover);
                }
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut buf = Vec::with_capacity(n * 3);
        for i in 0..n {
            for c in 0..CHANNELS {
                buf.push((self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        buf
    }

    pub fn from_rgb8(width: usize, height: usize, buf: &[u8]) -> Result<Image> {
        let n = width * height;
        if buf.len() != n * 3 {
            return Err(Error::shape(n * 3, buf.len()));
        }
        let mut img = Image::new(width, height);
        for i in 0..n {
            for c in 0..CHANNELS {
                img.data[c * n + i] = buf[i * 3 + c] as f32 / 255.0;
            }
        }
        Ok(img)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = BufReader::new(File::open(path)?);
        let mut dec = png::Decoder::new(file);
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let buf = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => return Err(Error::Format("indexed PNG not expanded".into())),
        };
        Image::from_rgb8(w, h, &rgb)
    }
}

fn clamp_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let lo = lo.floor().max(0.0) as usize;
    let hi = (hi.ceil() + 1.0).max(0.0).min(n as f64) as usize;
    lo.min(hi)..hi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let mut img = Image::filled(9, 7, [0.2, 0.4, 0.6]);
        img.stroke([1.0, 1.0], [7.0, 5.0], 1.0, [1.0, 0.0, 0.0]);
        let q = Image::from_rgb8(9, 7, &img.to_rgb8()).unwrap();
        let dir = std::env::temp_dir().join(format!("structpose-png-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.png");
        q.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), q);
    }

    #[test]
    fn stroke_covers_its_centerline() {
        let mut img = Image::new(16, 16);
        img.stroke([2.0, 8.0], [13.0, 8.0], 1.0, [1.0, 1.0, 1.0]);
        assert_eq!(img.get(0, 7, 8), 1.0);
        assert_eq!(img.get(0, 7, 2), 0.0);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Image::filled(32, 32, [0.5, 0.25, 1.0]);
        let r = img.resize_bilinear(8, 8);
        assert!(r.data.iter().zip([0.5, 0.25, 1.0].iter().flat_map(|&v| std::iter::repeat(v).take(64))).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
