//! Datasets: YOLO label files, PPM/PGM images, seeded splits, brightness and
//! contrast augmentation, and a synthetic scene generator.
//!
//! On disk a dataset is a directory with `images/<id>.ppm` (or `.pgm`),
//! optional `labels/<id>.txt` (a missing file means no objects), and an
//! optional `classes.txt` with one class name per line.

mod augment;
mod image;
mod labels;
mod split;
mod synth;
#[cfg(test)]
mod tests;

use std::path::Path;

pub use augment::{augment_brightness_contrast, AugmentRanges};
pub use image::{decode_image, encode_ppm, load_image, resize_bilinear, save_ppm};
pub use labels::{parse_label_file, render_label_file, LabelBox, ParsedLabels};
pub use split::{split_counts, split_dataset, SplitManifest, DEFAULT_SPLIT};
pub use synth::{class_style, generate_synthetic_dataset, Shape, SynthConfig};

use crate::boxes::DetBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KNOWN_CLASS_NAMES: [&str; 5] = ["fracture", "text", "metal", "bone anomaly", "soft tissue"];
pub const DEFAULT_NUM_CLASSES: usize = 9;

/// The five known names followed by `class_<i>` placeholders.
pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|i| match KNOWN_CLASS_NAMES.get(i) {
            Some(n) => n.to_string(),
            None => format!("class_{i}"),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub boxes: Vec<LabelBox>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Ground truth in pixels of an `size x size` network input.
    pub fn gt_boxes(&self, size: usize) -> Vec<DetBox> {
        let s = size as f64;
        self.boxes
            .iter()
            .map(|b| DetBox::new(b.cx * s, b.cy * s, b.w * s, b.h * s, b.class_id, 1.0))
            .collect()
    }

    /// The image stretched to `size x size`; normalized labels are unaffected.
    pub fn resized(&self, size: usize) -> Result<Sample> {
        Ok(Sample {
            id: self.id.clone(),
            image: resize_bilinear(&self.image, size, size)?,
            boxes: self.boxes.clone(),
        })
    }
}

/// Stacks `[3, size, size]` images into a `[N, 3, size, size]` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>, size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        if img.shape() != [3, size, size] {
            return Err(Error::shape(
                "stack_images",
                format!("expected [3, {size}, {size}], got {:?}", img.shape()),
            ));
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    Tensor::new(vec![n, 3, size, size], data)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    pub class_names: Option<Vec<String>>,
    pub clipped: usize,
    pub dropped: usize,
}

/// Loads every image under `dir/images` (sorted by id) with its labels.
pub fn load_dataset(dir: &Path, num_classes: usize) -> Result<LoadedDataset> {
    let image_dir = dir.join("images");
    let entries = std::fs::read_dir(&image_dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", image_dir.display())))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    let mut out = LoadedDataset::default();
    for path in paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))?
            .to_string();
        let image = load_image(&path)?;
        let label_path = dir.join("labels").join(format!("{id}.txt"));
        let parsed = match std::fs::read_to_string(&label_path) {
            Ok(text) => parse_label_file(&text, num_classes)
                .map_err(|e| Error::Data(format!("{}: {e}", label_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ParsedLabels::default(),
            Err(e) => return Err(e.into()),
        };
        out.clipped += parsed.clipped;
        out.dropped += parsed.dropped;
        out.samples.push(Sample {
            id,
            image,
            boxes: parsed.boxes,
        });
    }
    if out.clipped + out.dropped > 0 {
        log::warn!(
            "{}: clipped {} boxes to the image, dropped {} empty after clipping",
            dir.display(),
            out.clipped,
            out.dropped
        );
    }
    if let Ok(text) = std::fs::read_to_string(dir.join("classes.txt")) {
        out.class_names = Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    Ok(out)
}

pub fn save_dataset(dir: &Path, samples: &[Sample], class_names: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    for s in samples {
        save_ppm(&s.image, &dir.join("images").join(format!("{}.ppm", s.id)))?;
        std::fs::write(dir.join("labels").join(format!("{}.txt", s.id)), render_label_file(&s.boxes))?;
    }
    let mut names = class_names.join("\n");
    names.push('\n');
    std::fs::write(dir.join("classes.txt"), names)?;
    Ok(())
}
