//! Line-delimited JSON plan manifest.
//!
//! The first line is a `{"kind":"plan",...}` header; every following line is
//! a `{"kind":"partition",...}` record carrying the bbox and the assigned
//! images with their origin tag and visibility ratio.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Assignment, Box2, GroundAxes, Origin, Partition, PartitionPlan};
use crate::error::{Error, Result};
use crate::sfm::SfmModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u32,
    pub name: String,
    pub origin: Origin,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlanRecord {
    Plan {
        ground_axes: GroundAxes,
        bounds: Box2,
        visibility_threshold: f64,
        target_size: f64,
        balanced: bool,
        partitions: usize,
    },
    Partition {
        id: usize,
        bbox: Box2,
        images: Vec<ImageEntry>,
    },
}

pub fn write_plan(plan: &PartitionPlan, model: &SfmModel, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = PlanRecord::Plan {
        ground_axes: plan.ground_axes,
        bounds: plan.bounds,
        visibility_threshold: plan.visibility_threshold,
        target_size: plan.target_size,
        balanced: plan.balanced,
        partitions: plan.partitions.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for part in &plan.partitions {
        let images = part
            .assignments
            .iter()
            .map(|a| ImageEntry {
                id: a.image_id,
                name: model
                    .images
                    .get(&a.image_id)
                    .map(|i| i.name.clone())
                    .unwrap_or_default(),
                origin: a.origin,
                ratio: a.ratio.is_finite().then_some(a.ratio),
            })
            .collect();
        serde_json::to_writer(
            &mut w,
            &PlanRecord::Partition {
                id: part.id,
                bbox: part.bbox,
                images,
            },
        )?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plan(path: &Path) -> Result<PartitionPlan> {
    let file = std::fs::File::open(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    let mut header = None;
    let mut partitions = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PlanRecord>(&line)? {
            PlanRecord::Plan {
                ground_axes,
                bounds,
                visibility_threshold,
                target_size,
                balanced,
                ..
            } => header = Some((ground_axes, bounds, visibility_threshold, target_size, balanced)),
            PlanRecord::Partition { id, bbox, images } => partitions.push(Partition {
                id,
                bbox,
                assignments: images
                    .into_iter()
                    .map(|e| Assignment {
                        image_id: e.id,
                        origin: e.origin,
                        ratio: e.ratio.unwrap_or(f64::NAN),
                    })
                    .collect(),
            }),
        }
    }
    let (ground_axes, bounds, visibility_threshold, target_size, balanced) =
        header.ok_or_else(|| Error::format(path.display().to_string(), "missing plan header"))?;
    Ok(PartitionPlan {
        partitions,
        ground_axes,
        bounds,
        visibility_threshold,
        target_size,
        balanced,
    })
}
