//! Seeded synthetic data: small labelled datasets on disk and separable
//! feature sets for training the alignment MLP.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::align_mlp::TrainSample;
use crate::encoders::{Embedding, FeatureMap};
use crate::error::{Error, Result};
use crate::eval::to_coco_bbox;
use crate::prompts::{vocabulary, CategoryTable};
use crate::regions::BBox;

const NAMES: [(&str, &str); 20] = [
    ("person", "person"),
    ("bicycle", "vehicle"),
    ("car", "vehicle"),
    ("dog", "animal"),
    ("cat", "animal"),
    ("bird", "animal"),
    ("boat", "vehicle"),
    ("chair", "furniture"),
    ("bottle", "kitchen"),
    ("horse", "animal"),
    ("sheep", "animal"),
    ("cow", "animal"),
    ("train", "vehicle"),
    ("bus", "vehicle"),
    ("tv", "electronic"),
    ("couch", "furniture"),
    ("cup", "kitchen"),
    ("clock", "indoor"),
    ("umbrella", "accessory"),
    ("kite", "sports"),
];

/// Category names for a synthetic vocabulary of `n` classes.
pub fn category_names(n: usize) -> Vec<(String, String)> {
    (0..n)
        .map(|i| match NAMES.get(i) {
            Some((name, sup)) => (name.to_string(), sup.to_string()),
            None => (format!("class{i}"), "object".to_string()),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub images: usize,
    pub categories: usize,
    /// Grid of `grid x grid` cells per image, each holding at most one object.
    pub grid: usize,
    pub cell: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { images: 6, categories: 5, grid: 3, cell: 32, max_objects: 5, seed: 7 }
    }
}

/// Paths of a dataset written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub images: PathBuf,
    pub masks: PathBuf,
    pub annotations: PathBuf,
    pub vocabulary: PathBuf,
    pub config: PathBuf,
}

/// Writes images, 16-bit label masks, COCO annotations, a vocabulary and a
/// planted-encoder run config under `root`.
///
/// Objects are rectangles of at least 12x12 pixels kept one pixel clear of
/// their cell border, so each is its own component and its GT box equals the
/// box localization recovers. Every image also gets a speck below the default
/// area floor.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> Result<DatasetPaths> {
    if spec.categories == 0 || spec.grid == 0 || spec.cell < 16 {
        return Err(Error::invalid("synthetic dataset needs >= 1 category, >= 1 cell and cells of >= 16 px"));
    }
    let cells = spec.grid * spec.grid;
    if spec.max_objects == 0 || spec.max_objects >= cells {
        return Err(Error::invalid(format!("max_objects must be in 1..{cells}")));
    }
    let paths = DatasetPaths {
        root: root.to_path_buf(),
        images: root.join("images"),
        masks: root.join("masks"),
        annotations: root.join("annotations.json"),
        vocabulary: root.join("vocabulary.json"),
        config: root.join("config.json"),
    };
    for d in [&paths.images, &paths.masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let names = category_names(spec.categories);
    let palette: Vec<[u8; 3]> = {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
        (0..spec.categories).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    };
    let side = (spec.grid * spec.cell) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for image_index in 0..spec.images {
        let image_id = image_index as u64 + 1;
        let mut img = RgbImage::from_fn(side, side, |_, _| Rgb([rng.random_range(0..40), rng.random_range(0..40), rng.random_range(0..40)]));
        let mut mask: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(side, side);
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(&mut rng);
        let n_objects = rng.random_range(1..=spec.max_objects);
        let mut label: u16 = 0;
        for (slot, &cell) in order.iter().take(n_objects + 1).enumerate() {
            let (cr, cc) = (cell / spec.grid * spec.cell, cell % spec.grid * spec.cell);
            label += 1;
            let bbox = if slot == n_objects {
                // Noise speck, filtered by the area floor.
                BBox::new(cr + 2, cc + 2, cr + 4, cc + 4)?
            } else {
                let h = rng.random_range(12..=spec.cell - 2);
                let w = rng.random_range(12..=spec.cell - 2);
                let r0 = cr + 1 + rng.random_range(0..=spec.cell - 2 - h);
                let c0 = cc + 1 + rng.random_range(0..=spec.cell - 2 - w);
                BBox::new(r0, c0, r0 + h - 1, c0 + w - 1)?
            };
            let category = rng.random_range(0..spec.categories);
            for r in bbox.min_row..=bbox.max_row {
                for c in bbox.min_col..=bbox.max_col {
                    mask.put_pixel(c as u32, r as u32, Luma([label]));
                    let base = palette[category];
                    let jitter: i16 = rng.random_range(-12..=12);
                    let px = base.map(|v| (i16::from(v) + jitter).clamp(0, 255) as u8);
                    img.put_pixel(c as u32, r as u32, Rgb(px));
                }
            }
            if slot < n_objects {
                annotations.push(json!({
                    "id": annotations.len() + 1,
                    "image_id": image_id,
                    "category_id": category + 1,
                    "bbox": to_coco_bbox(&bbox),
                    "area": bbox.area(),
                    "iscrowd": 0,
                }));
            }
        }
        let file_name = format!("{image_id:04}.png");
        let ipath = paths.images.join(&file_name);
        img.save(&ipath).map_err(|source| Error::Image { path: ipath.clone(), source })?;
        let mpath = paths.masks.join(&file_name);
        mask.save(&mpath).map_err(|source| Error::Image { path: mpath.clone(), source })?;
        images.push(json!({"id": image_id, "file_name": file_name, "height": side, "width": side}));
    }
    let categories: Vec<_> = names
        .iter()
        .enumerate()
        .map(|(i, (name, sup))| json!({"id": i + 1, "name": name, "supercategory": sup}))
        .collect();
    let write = |path: &Path, value: serde_json::Value| {
        let text = serde_json::to_string_pretty(&value).expect("json serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    };
    write(&paths.annotations, json!({"images": images, "annotations": annotations, "categories": categories}))?;
    let vocab: Vec<_> = names.iter().map(|(n, s)| json!({"name": n, "supercategory": s})).collect();
    write(&paths.vocabulary, json!(vocab))?;
    write(
        &paths.config,
        json!({
            "images": "images",
            "masks": "masks",
            "annotations": "annotations.json",
            "encoder": "planted",
            "svd": false,
            "theta": 0.0,
            "seed": spec.seed,
            "out": "out",
        }),
    )?;
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingTaskSpec {
    pub classes: usize,
    pub samples: usize,
    pub feature_shape: [usize; 3],
    pub embed_dim: usize,
    /// Per-coordinate Gaussian spread around each class prototype.
    pub spread: f64,
    pub seed: u64,
}

impl Default for TrainingTaskSpec {
    fn default() -> Self {
        TrainingTaskSpec { classes: 10, samples: 500, feature_shape: [2, 2, 16], embed_dim: 32, spread: 0.3, seed: 3 }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Separable classes: features are Gaussian clouds around per-class
/// prototypes, text embeddings are random unit vectors. Samples cycle through
/// the classes so every class is equally represented.
pub fn training_task(spec: &TrainingTaskSpec) -> Result<(Vec<TrainSample>, CategoryTable)> {
    if spec.classes < 2 || spec.samples == 0 || spec.embed_dim == 0 {
        return Err(Error::invalid("training task needs >= 2 classes, >= 1 sample and a positive dim"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let flat: usize = spec.feature_shape.iter().product();
    let prototypes: Vec<Vec<f64>> = (0..spec.classes).map(|_| gaussian(&mut rng, flat)).collect();
    let embeddings = (0..spec.classes)
        .map(|_| {
            Embedding::normalized(&gaussian(&mut rng, spec.embed_dim), 1e-12)
                .ok_or_else(|| Error::DegenerateEmbedding("random text embedding".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = (0..spec.samples)
        .map(|i| {
            let category = i % spec.classes;
            let values: Vec<f32> = prototypes[category]
                .iter()
                .map(|&p| (p + spec.spread * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            Ok(TrainSample { features: FeatureMap::new(spec.feature_shape, values)?, category })
        })
        .collect::<Result<Vec<_>>>()?;
    let names = category_names(spec.classes);
    // Training tables carry no catch-all row.
    let categories = vocabulary(names)?.into_iter().take(spec.classes).collect();
    Ok((samples, CategoryTable { categories, embeddings }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::load_coco_annotations;
    use crate::regions::{connected_components, filter_small, bounding_box, Connectivity, LabelMask};

    #[test]
    fn dataset_boxes_match_localization() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_dataset(dir.path(), &DatasetSpec::default()).unwrap();
        let ann = load_coco_annotations(&paths.annotations).unwrap();
        assert_eq!(ann.images.len(), 6);
        for info in &ann.images {
            let mask = LabelMask::load(paths.masks.join(&info.file_name)).unwrap();
            let mut found: Vec<BBox> = filter_small(connected_components(&mask, Connectivity::Eight), 100)
                .iter()
                .map(|c| bounding_box(c).unwrap())
                .collect();
            let mut truth: Vec<BBox> =
                ann.ground_truth.iter().filter(|g| g.image_id == info.id).map(|g| g.bbox).collect();
            found.sort_by_key(|b| (b.min_row, b.min_col));
            truth.sort_by_key(|b| (b.min_row, b.min_col));
            assert_eq!(found, truth);
            // The speck is present before filtering.
            assert_eq!(connected_components(&mask, Connectivity::Eight).len(), truth.len() + 1);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &DatasetSpec::default()).unwrap();
        write_dataset(b.path(), &DatasetSpec::default()).unwrap();
        for f in ["annotations.json", "images/0003.png", "masks/0003.png"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn training_task_shapes() {
        let (samples, table) = training_task(&TrainingTaskSpec::default()).unwrap();
        assert_eq!(samples.len(), 500);
        assert_eq!(table.len(), 10);
        assert_eq!(table.dim(), 32);
        assert!(table.something_else().is_none());
        assert_eq!((0..10).map(|c| samples.iter().filter(|s| s.category == c).count()).min(), Some(50));
    }
}
