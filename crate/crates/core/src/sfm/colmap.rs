//! COLMAP sparse model readers and writers (text and binary layouts).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{CameraIntrinsics, CameraModelKind, Feature, ImageRecord, Point3D, SfmModel, TrackEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelFormat {
    #[default]
    Auto,
    Text,
    Binary,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })
}

pub(super) fn read_model(dir: &Path, format: ModelFormat) -> Result<SfmModel> {
    let format = match format {
        ModelFormat::Auto if dir.join("cameras.bin").exists() => ModelFormat::Binary,
        ModelFormat::Auto if dir.join("cameras.txt").exists() => ModelFormat::Text,
        ModelFormat::Auto => {
            return Err(Error::Load {
                path: dir.join("cameras.{bin,txt}"),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no COLMAP model found"),
            })
        }
        f => f,
    };
    let mut model = SfmModel::default();
    match format {
        ModelFormat::Binary => {
            for cam in read_cameras_bin(&dir.join("cameras.bin"))? {
                model.cameras.insert(cam.0, cam.1);
            }
            for img in read_images_bin(&dir.join("images.bin"))? {
                model.images.insert(img.id, img);
            }
            for p in read_points_bin(&dir.join("points3D.bin"))? {
                model.points.insert(p.id, p);
            }
        }
        _ => {
            for cam in read_cameras_txt(&dir.join("cameras.txt"))? {
                model.cameras.insert(cam.0, cam.1);
            }
            for img in read_images_txt(&dir.join("images.txt"))? {
                model.images.insert(img.id, img);
            }
            for p in read_points_txt(&dir.join("points3D.txt"))? {
                model.points.insert(p.id, p);
            }
        }
    }
    Ok(model)
}

fn intrinsics_from_params(kind: CameraModelKind, width: u64, height: u64, params: &[f64]) -> Result<CameraIntrinsics> {
    let (fx, fy, cx, cy) = match (kind, params) {
        (CameraModelKind::SimplePinhole, [f, cx, cy]) => (*f, *f, *cx, *cy),
        (CameraModelKind::Pinhole, [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
        _ => {
            return Err(Error::format(
                "camera",
                format!("{} expects different parameter count, got {}", kind.colmap_name(), params.len()),
            ))
        }
    };
    let width = u32::try_from(width).map_err(|_| Error::format("camera", "width overflow"))?;
    let height = u32::try_from(height).map_err(|_| Error::format("camera", "height overflow"))?;
    let intr = CameraIntrinsics {
        model_kind: kind,
        width,
        height,
        fx,
        fy,
        cx,
        cy,
    };
    intr.validate()?;
    Ok(intr)
}

fn params_of(intr: &CameraIntrinsics) -> Vec<f64> {
    match intr.model_kind {
        CameraModelKind::SimplePinhole => vec![intr.fx, intr.cx, intr.cy],
        CameraModelKind::Pinhole => vec![intr.fx, intr.fy, intr.cx, intr.cy],
    }
}

// ---------------------------------------------------------------------------
// text

fn data_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(open(path)?);
    let mut lines = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.starts_with('#') {
            continue;
        }
        lines.push(line);
    }
    Ok(lines)
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, path: &Path, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path.display().to_string(), format!("bad or missing {what}")))
}

fn read_cameras_txt(path: &Path) -> Result<Vec<(u32, CameraIntrinsics)>> {
    let mut out = Vec::new();
    for line in data_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let id: u32 = parse(toks.next(), path, "camera id")?;
        let name = toks
            .next()
            .ok_or_else(|| Error::format(path.display().to_string(), "missing model"))?;
        let kind = CameraModelKind::from_colmap_name(name)?;
        let width: u64 = parse(toks.next(), path, "width")?;
        let height: u64 = parse(toks.next(), path, "height")?;
        let params = toks
            .map(|t| parse(Some(t), path, "camera parameter"))
            .collect::<Result<Vec<f64>>>()?;
        out.push((id, intrinsics_from_params(kind, width, height, &params)?));
    }
    Ok(out)
}

fn read_images_txt(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut lines = data_lines(path)?;
    while lines.last().is_some_and(|l| l.trim().is_empty()) && lines.len() % 2 == 1 {
        lines.pop();
    }
    if lines.len() % 2 != 0 {
        return Err(Error::format(path.display().to_string(), "odd number of image lines"));
    }
    let mut out = Vec::new();
    for pair in lines.chunks(2) {
        let mut toks = pair[0].split_whitespace();
        let id: u32 = parse(toks.next(), path, "image id")?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = parse(toks.next(), path, "qvec")?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = parse(toks.next(), path, "tvec")?;
        }
        let camera_id: u32 = parse(toks.next(), path, "camera id")?;
        let name = toks.collect::<Vec<_>>().join(" ");
        if name.is_empty() {
            return Err(Error::format(path.display().to_string(), "missing image name"));
        }
        let toks: Vec<&str> = pair[1].split_whitespace().collect();
        if toks.len() % 3 != 0 {
            return Err(Error::format(path.display().to_string(), "points2D not in triples"));
        }
        let features = toks
            .chunks(3)
            .map(|t| {
                let x: f64 = parse(Some(t[0]), path, "point2D x")?;
                let y: f64 = parse(Some(t[1]), path, "point2D y")?;
                let pid: i64 = parse(Some(t[2]), path, "point3D id")?;
                Ok(Feature {
                    xy: [x, y],
                    point3d_id: (pid >= 0).then_some(pid as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ImageRecord {
            id,
            name,
            qvec,
            tvec,
            camera_id,
            features,
        });
    }
    Ok(out)
}

fn read_points_txt(path: &Path) -> Result<Vec<Point3D>> {
    let mut out = Vec::new();
    for line in data_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 8 || (toks.len() - 8) % 2 != 0 {
            return Err(Error::format(path.display().to_string(), "bad point line"));
        }
        let id: u64 = parse(Some(toks[0]), path, "point id")?;
        let position = [
            parse(Some(toks[1]), path, "x")?,
            parse(Some(toks[2]), path, "y")?,
            parse(Some(toks[3]), path, "z")?,
        ];
        let color = [
            parse(Some(toks[4]), path, "r")?,
            parse(Some(toks[5]), path, "g")?,
            parse(Some(toks[6]), path, "b")?,
        ];
        let error: f64 = parse(Some(toks[7]), path, "error")?;
        let track = toks[8..]
            .chunks(2)
            .map(|t| {
                Ok(TrackEntry {
                    image_id: parse(Some(t[0]), path, "track image id")?,
                    feature_index: parse(Some(t[1]), path, "track feature index")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Point3D {
            id,
            position,
            color,
            error,
            track,
        });
    }
    Ok(out)
}

pub fn write_colmap_text(model: &SfmModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut w = create(&dir.join("cameras.txt"))?;
    writeln!(w, "# Camera list with one line of data per camera:")?;
    writeln!(w, "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]")?;
    writeln!(w, "# Number of cameras: {}", model.cameras.len())?;
    for (id, cam) in &model.cameras {
        write!(w, "{id} {} {} {}", cam.model_kind.colmap_name(), cam.width, cam.height)?;
        for p in params_of(cam) {
            write!(w, " {p}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;

    let mut w = create(&dir.join("images.txt"))?;
    writeln!(w, "# Image list with two lines of data per image:")?;
    writeln!(w, "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME")?;
    writeln!(w, "#   POINTS2D[] as (X, Y, POINT3D_ID)")?;
    writeln!(w, "# Number of images: {}", model.images.len())?;
    for img in model.images.values() {
        let [qw, qx, qy, qz] = img.qvec;
        let [tx, ty, tz] = img.tvec;
        writeln!(w, "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}", img.id, img.camera_id, img.name)?;
        let line = img
            .features
            .iter()
            .map(|f| {
                let pid = f.point3d_id.map_or(-1, |p| p as i64);
                format!("{} {} {pid}", f.xy[0], f.xy[1])
            })
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "{line}")?;
    }
    w.flush()?;

    let mut w = create(&dir.join("points3D.txt"))?;
    writeln!(w, "# 3D point list with one line of data per point:")?;
    writeln!(w, "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)")?;
    writeln!(w, "# Number of points: {}", model.points.len())?;
    for p in model.points.values() {
        let [x, y, z] = p.position;
        let [r, g, b] = p.color;
        write!(w, "{} {x} {y} {z} {r} {g} {b} {}", p.id, p.error)?;
        for t in &p.track {
            write!(w, " {} {}", t.image_id, t.feature_index)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// binary

fn truncated(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::format(path.display().to_string(), format!("truncated binary file: {e}"))
}

fn read_cameras_bin(path: &Path) -> Result<Vec<(u32, CameraIntrinsics)>> {
    let mut r = BufReader::new(open(path)?);
    let err = truncated(path);
    let n = r.read_u64::<LittleEndian>().map_err(&err)?;
    let mut out = Vec::with_capacity(n.min(1 << 16) as usize);
    for _ in 0..n {
        let id = r.read_u32::<LittleEndian>().map_err(&err)?;
        let model_id = r.read_i32::<LittleEndian>().map_err(&err)?;
        let kind = CameraModelKind::from_colmap_id(model_id as i64)?;
        let width = r.read_u64::<LittleEndian>().map_err(&err)?;
        let height = r.read_u64::<LittleEndian>().map_err(&err)?;
        let n_params = match kind {
            CameraModelKind::SimplePinhole => 3,
            CameraModelKind::Pinhole => 4,
        };
        let mut params = vec![0.0; n_params];
        r.read_f64_into::<LittleEndian>(&mut params).map_err(&err)?;
        out.push((id, intrinsics_from_params(kind, width, height, &params)?));
    }
    Ok(out)
}

fn read_cstring(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    loop {
        let b = r.read_u8().map_err(truncated(path))?;
        if b == 0 {
            break;
        }
        bytes.push(b);
    }
    String::from_utf8(bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn read_images_bin(path: &Path) -> Result<Vec<ImageRecord>> {
    let mut r = BufReader::new(open(path)?);
    let err = truncated(path);
    let n = r.read_u64::<LittleEndian>().map_err(&err)?;
    let mut out = Vec::with_capacity(n.min(1 << 16) as usize);
    for _ in 0..n {
        let id = r.read_u32::<LittleEndian>().map_err(&err)?;
        let mut qvec = [0.0; 4];
        r.read_f64_into::<LittleEndian>(&mut qvec).map_err(&err)?;
        let mut tvec = [0.0; 3];
        r.read_f64_into::<LittleEndian>(&mut tvec).map_err(&err)?;
        let camera_id = r.read_u32::<LittleEndian>().map_err(&err)?;
        let name = read_cstring(&mut r, path)?;
        let n_feat = r.read_u64::<LittleEndian>().map_err(&err)?;
        let mut features = Vec::with_capacity(n_feat.min(1 << 20) as usize);
        for _ in 0..n_feat {
            let x = r.read_f64::<LittleEndian>().map_err(&err)?;
            let y = r.read_f64::<LittleEndian>().map_err(&err)?;
            let pid = r.read_i64::<LittleEndian>().map_err(&err)?;
            features.push(Feature {
                xy: [x, y],
                point3d_id: (pid >= 0).then_some(pid as u64),
            });
        }
        out.push(ImageRecord {
            id,
            name,
            qvec,
            tvec,
            camera_id,
            features,
        });
    }
    Ok(out)
}

fn read_points_bin(path: &Path) -> Result<Vec<Point3D>> {
    let mut r = BufReader::new(open(path)?);
    let err = truncated(path);
    let n = r.read_u64::<LittleEndian>().map_err(&err)?;
    let mut out = Vec::with_capacity(n.min(1 << 20) as usize);
    for _ in 0..n {
        let id = r.read_u64::<LittleEndian>().map_err(&err)?;
        let mut position = [0.0; 3];
        r.read_f64_into::<LittleEndian>(&mut position).map_err(&err)?;
        let mut color = [0u8; 3];
        r.read_exact(&mut color).map_err(&err)?;
        let error = r.read_f64::<LittleEndian>().map_err(&err)?;
        let len = r.read_u64::<LittleEndian>().map_err(&err)?;
        let mut track = Vec::with_capacity(len.min(1 << 16) as usize);
        for _ in 0..len {
            let image_id = r.read_u32::<LittleEndian>().map_err(&err)?;
            let feature_index = r.read_u32::<LittleEndian>().map_err(&err)?;
            track.push(TrackEntry {
                image_id,
                feature_index,
            });
        }
        out.push(Point3D {
            id,
            position,
            color,
            error,
            track,
        });
    }
    Ok(out)
}

pub fn write_colmap_binary(model: &SfmModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut w = create(&dir.join("cameras.bin"))?;
    w.write_u64::<LittleEndian>(model.cameras.len() as u64)?;
    for (id, cam) in &model.cameras {
        w.write_u32::<LittleEndian>(*id)?;
        w.write_i32::<LittleEndian>(cam.model_kind.colmap_id())?;
        w.write_u64::<LittleEndian>(cam.width as u64)?;
        w.write_u64::<LittleEndian>(cam.height as u64)?;
        for p in params_of(cam) {
            w.write_f64::<LittleEndian>(p)?;
        }
    }
    w.flush()?;

    let mut w = create(&dir.join("images.bin"))?;
    w.write_u64::<LittleEndian>(model.images.len() as u64)?;
    for img in model.images.values() {
        w.write_u32::<LittleEndian>(img.id)?;
        for q in img.qvec {
            w.write_f64::<LittleEndian>(q)?;
        }
        for t in img.tvec {
            w.write_f64::<LittleEndian>(t)?;
        }
        w.write_u32::<LittleEndian>(img.camera_id)?;
        w.write_all(img.name.as_bytes())?;
        w.write_u8(0)?;
        w.write_u64::<LittleEndian>(img.features.len() as u64)?;
        for f in &img.features {
            w.write_f64::<LittleEndian>(f.xy[0])?;
            w.write_f64::<LittleEndian>(f.xy[1])?;
            w.write_i64::<LittleEndian>(f.point3d_id.map_or(-1, |p| p as i64))?;
        }
    }
    w.flush()?;

    let mut w = create(&dir.join("points3D.bin"))?;
    w.write_u64::<LittleEndian>(model.points.len() as u64)?;
    for p in model.points.values() {
        w.write_u64::<LittleEndian>(p.id)?;
        for c in p.position {
            w.write_f64::<LittleEndian>(c)?;
        }
        w.write_all(&p.color)?;
        w.write_f64::<LittleEndian>(p.error)?;
        w.write_u64::<LittleEndian>(p.track.len() as u64)?;
        for t in &p.track {
            w.write_u32::<LittleEndian>(t.image_id)?;
            w.write_u32::<LittleEndian>(t.feature_index)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfm::load_colmap_model;

    fn tiny_model() -> SfmModel {
        let mut model = SfmModel::default();
        model.cameras.insert(
            1,
            CameraIntrinsics {
                model_kind: CameraModelKind::SimplePinhole,
                width: 64,
                height: 48,
                fx: 50.5,
                fy: 50.5,
                cx: 32.0,
                cy: 24.0,
            },
        );
        model.cameras.insert(2, CameraIntrinsics::pinhole(64, 48, 40.0, 41.25, 31.5, 23.5));
        let q = {
            let v = [0.9f64, 0.1, -0.3, 0.2];
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            v.map(|c| c / n)
        };
        model.images.insert(
            3,
            ImageRecord {
                id: 3,
                name: "frame 003.png".into(),
                qvec: q,
                tvec: [0.1, -2.0, 3.0 / 7.0],
                camera_id: 2,
                features: vec![
                    Feature { xy: [1.25, 2.5], point3d_id: Some(10) },
                    Feature { xy: [5.0, 6.0], point3d_id: None },
                ],
            },
        );
        model.images.insert(
            4,
            ImageRecord {
                id: 4,
                name: "b.png".into(),
                qvec: [1.0, 0.0, 0.0, 0.0],
                tvec: [0.0; 3],
                camera_id: 1,
                features: vec![],
            },
        );
        model.points.insert(
            10,
            Point3D {
                id: 10,
                position: [0.1, 0.2, 1.0 / 3.0],
                color: [255, 0, 17],
                error: 0.125,
                track: vec![TrackEntry { image_id: 3, feature_index: 0 }],
            },
        );
        model
    }

    #[test]
    fn text_and_binary_parse_identically() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        write_colmap_text(&model, dir.path()).unwrap();
        write_colmap_binary(&model, dir.path()).unwrap();
        let text = load_colmap_model(dir.path(), ModelFormat::Text).unwrap();
        let bin = load_colmap_model(dir.path(), ModelFormat::Binary).unwrap();
        assert_eq!(text, bin);
        assert_eq!(text, model);
    }

    #[test]
    fn empty_model_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = SfmModel::default();
        model.cameras.insert(1, CameraIntrinsics::pinhole(8, 8, 4.0, 4.0, 4.0, 4.0));
        write_colmap_text(&model, dir.path()).unwrap();
        let loaded = load_colmap_model(dir.path(), ModelFormat::Auto).unwrap();
        assert_eq!(loaded.cameras.len(), 1);
        assert!(loaded.images.is_empty() && loaded.points.is_empty());
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        write_colmap_text(&model, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("points3D.txt")).unwrap();
        let err = load_colmap_model(dir.path(), ModelFormat::Text).unwrap_err().to_string();
        assert!(err.contains("points3D.txt"), "{err}");
    }

    #[test]
    fn unsupported_model_names_id() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cameras.txt"), "1 OPENCV 10 10 5 5 5 5 0 0 0 0\n").unwrap();
        std::fs::write(dir.path().join("images.txt"), "").unwrap();
        std::fs::write(dir.path().join("points3D.txt"), "").unwrap();
        let err = load_colmap_model(dir.path(), ModelFormat::Text).unwrap_err();
        assert!(matches!(err, Error::UnsupportedCameraModel { model_id: 4, .. }), "{err}");
    }

    #[test]
    fn broken_track_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model();
        model.points.get_mut(&10).unwrap().track[0].feature_index = 1;
        write_colmap_binary(&model, dir.path()).unwrap();
        let err = load_colmap_model(dir.path(), ModelFormat::Binary).unwrap_err().to_string();
        assert!(err.contains("[10]"), "{err}");
    }
}
