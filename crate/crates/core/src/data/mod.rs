//! Images, labels, datasets.

mod image;
mod labels;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Annotation;

pub use image::{to_input_tensor, ImageBuffer, PAD_VALUE};
pub use labels::{convert_visdrone, parse_labels, parse_normalized, write_labels, write_normalized, Label};
pub use synth::{synth_sample, synth_samples, write_synth_dataset, BACKGROUND, CLASS_COLORS, MAX_SIDE, MIN_SIDE};

pub const NUM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["pedestrian", "people", "bicycle", "car", "van", "truck", "tricycle", "awning-tricycle", "bus", "motor"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// A dataset split as image/label path pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn new(split: impl Into<String>, items: Vec<ManifestItem>) -> Self {
        Manifest { split: split.into(), classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(), items }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Loads a manifest; relative item paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: Manifest = serde_json::from_str(&std::fs::read_to_string(path).map_err(Error::at_path(path))?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.classes.iter().map(String::as_str).ne(CLASS_NAMES) {
            return Err(Error::Format(format!("{}: class list must be {CLASS_NAMES:?}", path.display())));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for it in &mut m.items {
            for p in [&mut it.image, &mut it.label] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }
}

/// Reads one image and its labels as pixel boxes.
pub fn load_sample(item: &ManifestItem) -> Result<(ImageBuffer, Vec<Annotation>)> {
    let img = ImageBuffer::load_ppm(&item.image)?;
    let anns = parse_labels(
        &std::fs::read_to_string(&item.label).map_err(Error::at_path(&item.label))?,
        img.width,
        img.height,
    )?;
    Ok((img, anns))
}
