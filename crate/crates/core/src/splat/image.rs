use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved `f64` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: u32, height: u32, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width as usize * height as usize * channels],
        }
    }

    pub fn filled(width: u32, height: u32, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width as usize * height as usize * channels],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn at(&self, x: u32, y: u32, c: usize) -> f64 {
        self.data[(y as usize * self.width as usize + x as usize) * self.channels + c]
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[f64] {
        let i = (y as usize * self.width as usize + x as usize) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Box-filter resample to `width × height`.
    pub fn resized(&self, width: u32, height: u32) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::zeros(width, height, self.channels);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let (y0, y1) = (y as f64 * sy, (y + 1) as f64 * sy);
            for x in 0..width {
                let (x0, x1) = (x as f64 * sx, (x + 1) as f64 * sx);
                let mut acc = vec![0.0; self.channels];
                let mut wsum = 0.0;
                for yy in (y0.floor() as u32)..(y1.ceil() as u32).min(self.height) {
                    let wy = (y1.min(yy as f64 + 1.0) - y0.max(yy as f64)).max(0.0);
                    for xx in (x0.floor() as u32)..(x1.ceil() as u32).min(self.width) {
                        let wx = (x1.min(xx as f64 + 1.0) - x0.max(xx as f64)).max(0.0);
                        let w = wx * wy;
                        if w == 0.0 {
                            continue;
                        }
                        wsum += w;
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += w * self.at(xx, yy, c);
                        }
                    }
                }
                let i = (y as usize * width as usize + x as usize) * self.channels;
                for (c, a) in acc.into_iter().enumerate() {
                    out.data[i + c] = a / wsum;
                }
            }
        }
        out
    }

    /// Per-pixel binary mask resampled by majority of the covered area.
    pub fn resized_mask(mask: &[bool], width: u32, height: u32, new_w: u32, new_h: u32) -> Vec<bool> {
        let img = Image {
            width,
            height,
            channels: 1,
            data: mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect(),
        };
        img.resized(new_w, new_h).data.into_iter().map(|v| v >= 0.5).collect()
    }
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::Load {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Image(other),
        })?
        .to_rgb8();
    Ok(Image {
        width: img.width(),
        height: img.height(),
        channels: 3,
        data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    })
}

pub fn to_rgb8(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixel_count() * 3);
    for p in img.data.chunks(img.channels) {
        for c in 0..3 {
            let v = p[c.min(img.channels - 1)];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width, img.height, to_rgb8(img))
        .ok_or_else(|| Error::Argument("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Loads a single-channel PNG mask; nonzero pixels are kept (true).
pub fn load_mask(path: &Path) -> Result<(u32, u32, Vec<bool>)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width(), img.height());
    Ok((w, h, img.into_raw().into_iter().map(|v| v > 127).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_averages_blocks() {
        let img = Image {
            width: 4,
            height: 2,
            channels: 1,
            data: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        };
        let half = img.resized(2, 1);
        assert_eq!(half.data, vec![2.5, 4.5]);
    }

    #[test]
    fn resize_preserves_constant() {
        let img = Image::filled(9, 7, 3, 0.25);
        let r = img.resized(3, 2);
        assert!(r.data.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::zeros(3, 2, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 / 17.0;
        }
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
