//! Loading a dataset directory into training views.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::step::View;
use super::synth::{DatasetInfo, DATASET_INFO};
use crate::error::{Error, Result};
use crate::sfm::{align_depth, load_colmap_model, read_depth, read_pfm, ModelFormat, SfmModel};
use crate::splat::{load_mask, load_png, Camera};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetOptions {
    /// Metric `.depth` maps or monocular `.pfm` maps (aligned to the SfM
    /// points), named after the image stem.
    pub depth_dir: Option<PathBuf>,
    /// PNG masks named after the image stem; nonzero keeps a pixel.
    pub mask_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub model: SfmModel,
    /// Full-resolution views by image id.
    pub views: BTreeMap<u32, View>,
    pub test_ids: BTreeSet<u32>,
}

impl Dataset {
    pub fn train_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.views.keys().copied().filter(|id| !self.test_ids.contains(id))
    }
}

fn stem(name: &str) -> &str {
    let file = name.rsplit('/').next().unwrap_or(name);
    file.rsplit_once('.').map_or(file, |(s, _)| s)
}

/// Reads `sparse/0`, `images/` and, if present, `dataset.json` for the test
/// split.
pub fn load_dataset(root: &Path, opts: &DatasetOptions) -> Result<Dataset> {
    let model = load_colmap_model(&root.join("sparse/0"), ModelFormat::Auto)?;
    let info: Option<DatasetInfo> = match std::fs::read_to_string(root.join(DATASET_INFO)) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(source) => {
            return Err(Error::Load {
                path: root.join(DATASET_INFO),
                source,
            })
        }
    };
    let test_names: BTreeSet<String> = info.map(|i| i.test_images.into_iter().collect()).unwrap_or_default();
    let mut views = BTreeMap::new();
    let mut test_ids = BTreeSet::new();
    for img in model.images.values() {
        let intr = model.camera_for(img)?;
        let target = load_png(&root.join("images").join(&img.name))?;
        if target.width != intr.width || target.height != intr.height {
            return Err(Error::Integrity(format!(
                "image {} is {}x{} but its camera is {}x{}",
                img.name, target.width, target.height, intr.width, intr.height
            )));
        }
        let mask = match &opts.mask_dir {
            Some(dir) => {
                let p = dir.join(format!("{}.png", stem(&img.name)));
                if p.exists() {
                    let (w, h, m) = load_mask(&p)?;
                    if (w, h) != (intr.width, intr.height) {
                        return Err(Error::Integrity(format!("mask {} has the wrong size", p.display())));
                    }
                    Some(m)
                } else {
                    None
                }
            }
            None => None,
        };
        let depth = match &opts.depth_dir {
            Some(dir) => {
                let metric = dir.join(format!("{}.depth", stem(&img.name)));
                let mono = dir.join(format!("{}.pfm", stem(&img.name)));
                let map = if metric.exists() {
                    Some(read_depth(&metric)?)
                } else if mono.exists() {
                    Some(align_depth(&read_pfm(&mono)?, img, &model)?.0)
                } else {
                    None
                };
                match map {
                    Some(m) if (m.width, m.height) != (intr.width, intr.height) => Some(m.resized(intr.width, intr.height)),
                    other => other,
                }
            }
            None => None,
        };
        if test_names.contains(&img.name) {
            test_ids.insert(img.id);
        }
        views.insert(
            img.id,
            View {
                image_id: img.id,
                camera: Camera::new(intr.clone(), img.pose()),
                target,
                mask,
                depth,
            },
        );
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        model,
        views,
        test_ids,
    })
}
