//! Depth maps: file I/O and scale/shift alignment against SfM points.
//!
//! Raw layout (little endian): 8-byte magic `USKDEPTH`, `u32` width, `u32`
//! height, then `width * height` `f32` values in row-major order. Non-finite
//! values mark invalid pixels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{project_point, ImageRecord, SfmModel};
use crate::error::{Error, Result};

const DEPTH_MAGIC: &[u8; 8] = b"USKDEPTH";

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Self {
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Self {
            width,
            height,
            values,
            valid,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let i = (y * self.width + x) as usize;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Area-average resample to `width × height`; a target pixel is valid when
    /// any covered source pixel is.
    pub fn resized(&self, width: u32, height: u32) -> DepthMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut values = vec![f64::NAN; (width * height) as usize];
        let mut valid = vec![false; values.len()];
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let y0 = (y as f64 * sy).floor() as u32;
            let y1 = (((y + 1) as f64 * sy).ceil() as u32).min(self.height).max(y0 + 1);
            for x in 0..width {
                let x0 = (x as f64 * sx).floor() as u32;
                let x1 = (((x + 1) as f64 * sx).ceil() as u32).min(self.width).max(x0 + 1);
                let (mut sum, mut n) = (0.0, 0usize);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        if let Some(v) = self.get(xx, yy) {
                            sum += v;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    let i = (y * width + x) as usize;
                    values[i] = sum / n as f64;
                    valid[i] = true;
                }
            }
        }
        DepthMap {
            width,
            height,
            values,
            valid,
        }
    }
}

pub fn write_depth(map: &DepthMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DEPTH_MAGIC)?;
    w.write_u32::<LittleEndian>(map.width)?;
    w.write_u32::<LittleEndian>(map.height)?;
    for (v, ok) in map.values.iter().zip(&map.valid) {
        w.write_f32::<LittleEndian>(if *ok { *v as f32 } else { f32::NAN })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads either the raw `USKDEPTH` layout or a PFM file (by magic).
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let mut r = BufReader::new(File::open(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?);
    let mut magic = [0u8; 8];
    let peek = r.fill_buf()?;
    if peek.starts_with(b"Pf") || peek.starts_with(b"PF") {
        return read_pfm_from(&mut r, path);
    }
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path.display().to_string(), "missing depth header"))?;
    if &magic != DEPTH_MAGIC {
        return Err(Error::format(path.display().to_string(), "bad depth magic"));
    }
    let width = r.read_u32::<LittleEndian>()?;
    let height = r.read_u32::<LittleEndian>()?;
    let mut raw = vec![0f32; (width as usize) * (height as usize)];
    r.read_f32_into::<LittleEndian>(&mut raw)
        .map_err(|_| Error::format(path.display().to_string(), "truncated depth values"))?;
    Ok(DepthMap::new(width, height, raw.into_iter().map(f64::from).collect()))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let mut r = BufReader::new(File::open(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?);
    read_pfm_from(&mut r, path)
}

fn read_pfm_from(r: &mut impl BufRead, path: &Path) -> Result<DepthMap> {
    let bad = |d: &str| Error::format(path.display().to_string(), d.to_string());
    let mut header = Vec::new();
    // "Pf", "w h", "scale": three whitespace-terminated tokens groups
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        header.clear();
        r.read_until(b'\n', &mut header)?;
        if header.is_empty() {
            return Err(bad("truncated PFM header"));
        }
        let line = String::from_utf8_lossy(&header);
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "Pf" {
        return Err(bad("only single-channel PFM is supported"));
    }
    let width: u32 = tokens[1].parse().map_err(|_| bad("PFM width"))?;
    let height: u32 = tokens[2].parse().map_err(|_| bad("PFM height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("PFM scale"))?;
    let mut raw = vec![0f32; (width as usize) * (height as usize)];
    if scale < 0.0 {
        r.read_f32_into::<LittleEndian>(&mut raw)
    } else {
        r.read_f32_into::<byteorder::BigEndian>(&mut raw)
    }
    .map_err(|_| bad("truncated PFM data"))?;
    // PFM rows run bottom to top
    let w = width as usize;
    let mut values = Vec::with_capacity(raw.len());
    for row in (0..height as usize).rev() {
        values.extend(raw[row * w..(row + 1) * w].iter().map(|v| f64::from(*v)));
    }
    Ok(DepthMap::new(width, height, values))
}

pub fn write_pfm(map: &DepthMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1\n", map.width, map.height)?;
    let width = map.width as usize;
    for row in (0..map.height as usize).rev() {
        for i in row * width..(row + 1) * width {
            let v = if map.valid[i] { map.values[i] as f32 } else { f32::NAN };
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthFit {
    pub scale: f64,
    pub shift: f64,
    pub samples: usize,
}

/// Fits `scale * predicted + shift` to the camera-frame depth of the image's
/// linked SfM points and returns the rescaled map.
pub fn align_depth(depth: &DepthMap, img: &ImageRecord, model: &SfmModel) -> Result<(DepthMap, DepthFit)> {
    let intr = model.camera_for(img)?;
    let pose = img.pose();
    let sx = depth.width as f64 / intr.width as f64;
    let sy = depth.height as f64 / intr.height as f64;

    let mut pairs = Vec::new();
    for f in &img.features {
        let Some(point) = f.point3d_id.and_then(|id| model.points.get(&id)) else {
            continue;
        };
        let Some(proj) = project_point(intr, &pose, &point.position()) else {
            continue;
        };
        let (px, py) = (f.xy[0] * sx, f.xy[1] * sy);
        if px < 0.0 || py < 0.0 {
            continue;
        }
        let (x, y) = (px.floor() as u32, py.floor() as u32);
        if x >= depth.width || y >= depth.height {
            continue;
        }
        if let Some(pred) = depth.get(x, y) {
            pairs.push((pred, proj.depth));
        }
    }
    if pairs.len() < 2 {
        return Err(Error::Alignment(format!(
            "image {} has {} usable correspondences, need at least 2",
            img.name,
            pairs.len()
        )));
    }

    let n = pairs.len() as f64;
    let mean_p = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_t = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let var_p = pairs.iter().map(|p| (p.0 - mean_p).powi(2)).sum::<f64>();
    let cov = pairs.iter().map(|p| (p.0 - mean_p) * (p.1 - mean_t)).sum::<f64>();
    if var_p <= f64::EPSILON * mean_p.abs().max(1.0) * n {
        return Err(Error::Alignment(format!(
            "image {}: predicted depths are constant at the samples",
            img.name
        )));
    }
    let scale = cov / var_p;
    if scale <= 0.0 {
        return Err(Error::Alignment(format!(
            "image {}: fitted scale {scale} is not positive",
            img.name
        )));
    }
    let shift = mean_t - scale * mean_p;

    let values = depth
        .values
        .iter()
        .zip(&depth.valid)
        .map(|(v, ok)| if *ok { scale * v + shift } else { f64::NAN })
        .collect();
    Ok((
        DepthMap {
            width: depth.width,
            height: depth.height,
            values,
            valid: depth.valid.clone(),
        },
        DepthFit {
            scale,
            shift,
            samples: pairs.len(),
        },
    ))
}
