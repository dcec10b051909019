//! Binary scene checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic     8 bytes  "USKSPLAT"
//! version   u32      1
//! count     u64      number of Gaussians
//! embed_dim u32
//! mu        count × 3 f64
//! rot       count × 4 f64   (w, x, y, z)
//! log_scale count × 3 f64
//! opacity   count × f64     logits
//! color     count × 3 f64
//! embedding count × embed_dim f64
//! has_app   u8
//! -- appearance section, present when has_app = 1 --
//! tag       4 bytes  "APPR"
//! version   u32      1
//! gdim, idim, in_dim, hidden  u32 each
//! nparams   u64, then nparams f64
//! nimages   u64, then per image: u32 id, idim f64
//! ```
//!
//! Densification statistics are not stored.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::appearance::{AppearanceModel, Mlp};
use crate::error::{Error, Result};
use crate::splat::GaussianSet;

const MAGIC: &[u8; 8] = b"USKSPLAT";
const VERSION: u32 = 1;
const APP_TAG: &[u8; 4] = b"APPR";
const APP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub set: GaussianSet,
    pub appearance: Option<AppearanceModel>,
}

fn put_all(w: &mut impl Write, vals: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    for v in vals {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, set: &GaussianSet, appearance: Option<&AppearanceModel>) -> Result<()> {
    if !set.is_consistent() {
        return Err(Error::State("Gaussian set arrays have mismatched lengths".into()));
    }
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u64::<LE>(set.len() as u64)?;
    w.write_u32::<LE>(set.embed_dim as u32)?;
    put_all(w, set.mu.iter().flatten().copied())?;
    put_all(w, set.rot.iter().flatten().copied())?;
    put_all(w, set.log_scale.iter().flatten().copied())?;
    put_all(w, set.opacity_logit.iter().copied())?;
    put_all(w, set.color.iter().flatten().copied())?;
    put_all(w, set.embedding.iter().copied())?;
    match appearance {
        None => w.write_u8(0)?,
        Some(app) => {
            w.write_u8(1)?;
            w.write_all(APP_TAG)?;
            w.write_u32::<LE>(APP_VERSION)?;
            for v in [app.gaussian_dim, app.image_dim, app.mlp.in_dim, app.mlp.hidden] {
                w.write_u32::<LE>(v as u32)?;
            }
            w.write_u64::<LE>(app.mlp.params.len() as u64)?;
            put_all(w, app.mlp.params.iter().copied())?;
            w.write_u64::<LE>(app.image_embeddings.len() as u64)?;
            for (id, e) in &app.image_embeddings {
                if e.len() != app.image_dim {
                    return Err(Error::State(format!("image {id} embedding has width {}", e.len())));
                }
                w.write_u32::<LE>(*id)?;
                put_all(w, e.iter().copied())?;
            }
        }
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("checkpoint", "truncated file")
    } else {
        Error::Io(e)
    }
}

fn take_f64(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out).map_err(truncated)?;
    Ok(out)
}

fn chunks<const N: usize>(flat: Vec<f64>) -> Vec<[f64; N]> {
    flat.chunks_exact(N).map(|c| std::array::from_fn(|k| c[k])).collect()
}

/// Guards allocations driven by header counts.
fn checked_len(count: u64, width: usize, what: &str) -> Result<usize> {
    usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(width.max(1)))
        .filter(|n| *n <= 1 << 32)
        .map(|n| n / width.max(1))
        .ok_or_else(|| Error::format("checkpoint", format!("implausible {what} count {count}")))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LE>().map_err(truncated)?;
    let embed_dim = r.read_u32::<LE>().map_err(truncated)? as usize;
    let n = checked_len(count, 14 + embed_dim, "Gaussian")?;
    let mut set = GaussianSet::new(embed_dim);
    set.mu = chunks(take_f64(r, 3 * n)?);
    set.rot = chunks(take_f64(r, 4 * n)?);
    set.log_scale = chunks(take_f64(r, 3 * n)?);
    set.opacity_logit = take_f64(r, n)?;
    set.color = chunks(take_f64(r, 3 * n)?);
    set.embedding = take_f64(r, n * embed_dim)?;
    set.grad_accum = vec![0.0; n];
    set.grad_count = vec![0; n];

    let appearance = match r.read_u8().map_err(truncated)? {
        0 => None,
        1 => {
            let mut tag = [0u8; 4];
            r.read_exact(&mut tag).map_err(truncated)?;
            if &tag != APP_TAG {
                return Err(Error::format("checkpoint", "bad appearance section tag"));
            }
            let v = r.read_u32::<LE>().map_err(truncated)?;
            if v != APP_VERSION {
                return Err(Error::format("checkpoint", format!("unsupported appearance version {v}")));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.read_u32::<LE>().map_err(truncated)? as usize;
            }
            let [gaussian_dim, image_dim, in_dim, hidden] = dims;
            if gaussian_dim != embed_dim || in_dim != gaussian_dim + image_dim {
                return Err(Error::format("checkpoint", "appearance dimensions disagree with the scene"));
            }
            let np = checked_len(r.read_u64::<LE>().map_err(truncated)?, 1, "MLP parameter")?;
            if np != Mlp::param_count(in_dim, hidden) {
                return Err(Error::format("checkpoint", format!("MLP has {np} parameters")));
            }
            let params = take_f64(r, np)?;
            let ni = checked_len(r.read_u64::<LE>().map_err(truncated)?, image_dim + 1, "image")?;
            let mut image_embeddings = BTreeMap::new();
            for _ in 0..ni {
                let id = r.read_u32::<LE>().map_err(truncated)?;
                image_embeddings.insert(id, take_f64(r, image_dim)?);
            }
            Some(AppearanceModel {
                gaussian_dim,
                image_dim,
                mlp: Mlp { in_dim, hidden, params },
                image_embeddings,
            })
        }
        f => return Err(Error::format("checkpoint", format!("bad appearance flag {f}"))),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(Checkpoint { set, appearance })
}

pub fn save_checkpoint(path: &Path, set: &GaussianSet, appearance: Option<&AppearanceModel>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, set, appearance)?;
    std::fs::write(path, buf).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::Gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(with_app: bool) -> (GaussianSet, Option<AppearanceModel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = GaussianSet::new(3);
        for _ in 0..5 {
            let mut g = Gaussian::isotropic([rng.gen(), rng.gen(), rng.gen()], 0.1, 0.4, [rng.gen(), 0.2, 0.9]);
            g.embedding = vec![rng.gen(), -1.5, 1e-300];
            set.push(g);
        }
        let app = with_app.then(|| AppearanceModel::new(3, [4, 9, 2], &mut rng));
        (set, app)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for with_app in [false, true] {
            let (set, app) = sample(with_app);
            let mut a = Vec::new();
            write_checkpoint(&mut a, &set, app.as_ref()).unwrap();
            let ck = read_checkpoint(&mut a.as_slice()).unwrap();
            assert_eq!(ck.set, set);
            assert_eq!(ck.appearance, app);
            let mut b = Vec::new();
            write_checkpoint(&mut b, &ck.set, ck.appearance.as_ref()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncation_and_garbage_are_format_errors() {
        let (set, app) = sample(true);
        let mut a = Vec::new();
        write_checkpoint(&mut a, &set, app.as_ref()).unwrap();
        for cut in [3, 20, a.len() - 1] {
            assert!(matches!(read_checkpoint(&mut &a[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut extra = a.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(&mut extra.as_slice()), Err(Error::Format { .. })));
        a[0] = b'X';
        assert!(matches!(read_checkpoint(&mut a.as_slice()), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_set_roundtrips() {
        let set = GaussianSet::new(0);
        let mut a = Vec::new();
        write_checkpoint(&mut a, &set, None).unwrap();
        assert_eq!(read_checkpoint(&mut a.as_slice()).unwrap().set, set);
    }
}
