//! Batch stages. Each stage reads the previous stage's files from the output
//! directory and writes its own, so a full run is the stages in sequence.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::align_mlp::{load_checkpoint, MlpImageEncoder};
use crate::config::{EncoderKind, RunConfig, SvdScope};
use crate::encoders::{CacheEncoder, Embedding, Encoder, MockEncoder, PlantedMock, RegionKey, FEATURE_SHAPE};
use crate::error::{Error, Result};
use crate::eval::{build_report, evaluate, load_coco_annotations, metrics_csv, Annotations, Detection, MatchParams};
use crate::matcher::{predict, PredictionLine, Similarity, DISCARDED};
use crate::ovt::Tensor;
use crate::overlay::{self, Label};
use crate::prompts::{build_category_table, load_vocabulary, vocabulary, CategorySpec, CategoryTable};
use crate::regions::{localize, BBox, LabelMask, LocalizeParams};
use crate::shared_space::{concat, project as svd_project, split_scores};

pub const FORMAT_VERSION: u32 = 1;

pub const REGIONS_FILE: &str = "regions.json";
pub const CROPS_DIR: &str = "crops";
pub const CATEGORIES_FILE: &str = "categories.json";
pub const CATEGORY_TABLE_FILE: &str = "category_table.ovt";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const SCORES_FILE: &str = "scores.json";
pub const SCORES_DIR: &str = "scores";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const OVERLAYS_DIR: &str = "overlays";

const PREDICTIONS_KIND: &str = "ovor-predictions";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MASK_EXTENSIONS: [&str; 2] = ["png", "ovt"];

/// Version and config hash carried by every JSON artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub format_version: u32,
    pub config_hash: String,
}

impl Stamp {
    pub fn of(cfg: &RunConfig) -> Self {
        Stamp { format_version: FORMAT_VERSION, config_hash: cfg.hash() }
    }

    fn check(&self, path: &Path, expected_hash: Option<&str>) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("format version {} (this build reads {FORMAT_VERSION})", self.format_version),
            });
        }
        if let Some(h) = expected_hash {
            if h != self.config_hash {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("written under config {}, current config is {h}", self.config_hash),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: u64,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub region_id: usize,
    pub label: u32,
    pub area: usize,
    pub bbox: BBox,
    /// Crop path relative to the output directory.
    pub crop: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRegions {
    pub image_id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub regions: Vec<RegionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionsFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub images: Vec<ImageRegions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoriesFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub table: String,
    pub categories: Vec<CategorySpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: u64,
    pub file: String,
    pub regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub dim: usize,
    pub preprocessing: Option<String>,
    pub images: Vec<EmbeddingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub k: usize,
    pub scope: SvdScope,
    /// Files of (objects then categories) x k score rows.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionsHeader {
    kind: String,
    #[serde(flatten)]
    stamp: Stamp,
}

fn wrap(image_id: u64, stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Stage { image_id, stage, source: Box::new(e) }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Annotations, if configured.
pub fn load_annotations(cfg: &RunConfig) -> Result<Option<Annotations>> {
    cfg.annotations_path().map(load_coco_annotations).transpose()
}

/// Recognition vocabulary: the vocabulary file if given, else the annotation categories.
pub fn recognition_vocabulary(cfg: &RunConfig, annotations: Option<&Annotations>) -> Result<Vec<CategorySpec>> {
    match (cfg.vocabulary_path(), annotations) {
        (Some(p), _) => load_vocabulary(p),
        (None, Some(a)) => Ok(a.vocabulary.clone()),
        (None, None) => Err(Error::Config("either annotations or vocabulary must be given".into())),
    }
}

/// Images listed in the annotations, else every image file in the image directory.
/// Directory listings use numeric file stems as ids when all stems are numeric.
pub fn list_images(cfg: &RunConfig, annotations: Option<&Annotations>) -> Result<Vec<ImageEntry>> {
    if let Some(a) = annotations.filter(|a| !a.images.is_empty()) {
        let mut out: Vec<ImageEntry> =
            a.images.iter().map(|i| ImageEntry { image_id: i.id, file_name: i.file_name.clone() }).collect();
        out.sort_by_key(|e| e.image_id);
        return Ok(out);
    }
    let dir = cfg.images_dir();
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            Path::new(n)
                .extension()
                .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        })
        .collect();
    names.sort();
    let stem = |n: &str| Path::new(n).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let numeric: Option<Vec<u64>> = names.iter().map(|n| stem(n).parse().ok()).collect();
    let mut out: Vec<ImageEntry> = match numeric {
        Some(ids) if ids.iter().collect::<std::collections::BTreeSet<_>>().len() == ids.len() => {
            ids.into_iter().zip(names).map(|(image_id, file_name)| ImageEntry { image_id, file_name }).collect()
        }
        _ => (1u64..).zip(names).map(|(image_id, file_name)| ImageEntry { image_id, file_name }).collect(),
    };
    out.sort_by_key(|e| e.image_id);
    Ok(out)
}

/// `masks/<stem>.png` or `masks/<stem>.ovt`.
pub fn mask_path(cfg: &RunConfig, image: &ImageEntry) -> Result<PathBuf> {
    let stem = Path::new(&image.file_name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dir = cfg.masks_dir();
    MASK_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Integrity(format!("no mask {stem}.png or {stem}.ovt under {}", dir.display())))
}

pub fn crop_name(image_id: u64, region_id: usize) -> String {
    format!("{CROPS_DIR}/{image_id}_{region_id}.png")
}

/// Masks to regions: writes `regions.json` and one PNG crop per region.
pub fn stage_localize(cfg: &RunConfig) -> Result<RegionsFile> {
    let out = cfg.out_dir();
    create_dir(&out.join(CROPS_DIR))?;
    let annotations = load_annotations(cfg)?;
    let images = list_images(cfg, annotations.as_ref())?;
    let params = LocalizeParams { min_area: cfg.min_area, connectivity: cfg.connectivity };
    let per_image = images
        .par_iter()
        .map(|entry| {
            let err = wrap(entry.image_id, "localize");
            let img = load_rgb(&cfg.images_dir().join(&entry.file_name)).map_err(&err)?;
            let mask = LabelMask::load(mask_path(cfg, entry).map_err(&err)?).map_err(&err)?;
            let regions = localize(&img, &mask, params).map_err(&err)?;
            let records = regions
                .iter()
                .map(|r| {
                    let crop = crop_name(entry.image_id, r.region_id);
                    save_png(&r.patch, &out.join(&crop))?;
                    Ok(RegionRecord {
                        region_id: r.region_id,
                        label: r.component.label,
                        area: r.component.area(),
                        bbox: r.bbox,
                        crop,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(&err)?;
            Ok(ImageRegions {
                image_id: entry.image_id,
                file_name: entry.file_name.clone(),
                width: img.width(),
                height: img.height(),
                regions: records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = RegionsFile { stamp: Stamp::of(cfg), images: per_image };
    write_json(&out.join(REGIONS_FILE), &file)?;
    log::info!(
        "localized {} regions in {} images",
        file.images.iter().map(|i| i.regions.len()).sum::<usize>(),
        file.images.len()
    );
    Ok(file)
}

fn text_encoder(cfg: &RunConfig) -> Result<Arc<dyn Encoder>> {
    Ok(match cfg.encoder {
        EncoderKind::Mock | EncoderKind::Planted => Arc::new(MockEncoder::new(cfg.seed)),
        EncoderKind::ClipCache => Arc::new(open_cache(cfg)?),
        EncoderKind::Mlp => match cfg.cache_root() {
            Some(root) => Arc::new(CacheEncoder::open(root)?),
            None => Arc::new(MockEncoder::new(cfg.seed)),
        },
    })
}

fn open_cache(cfg: &RunConfig) -> Result<CacheEncoder> {
    let root = cfg
        .cache_root()
        .ok_or_else(|| Error::Config("clip-cache needs cache_dir or OVOR_CACHE_DIR".into()))?;
    CacheEncoder::open(root)
}

/// Vocabulary to category table: writes `categories.json` and the C x D table.
pub fn stage_embed_text(cfg: &RunConfig) -> Result<CategoryTable> {
    let out = cfg.out_dir();
    create_dir(&out)?;
    let annotations = load_annotations(cfg)?;
    let vocab = recognition_vocabulary(cfg, annotations.as_ref())?;
    let table = build_category_table(&vocab, text_encoder(cfg)?.as_ref(), cfg.phrase)?;
    table.to_tensor().save(out.join(CATEGORY_TABLE_FILE))?;
    write_json(
        &out.join(CATEGORIES_FILE),
        &CategoriesFile {
            stamp: Stamp::of(cfg),
            table: CATEGORY_TABLE_FILE.to_string(),
            categories: table.categories.clone(),
        },
    )?;
    log::info!("embedded {} categories", table.len());
    Ok(table)
}

pub fn read_regions(cfg: &RunConfig) -> Result<RegionsFile> {
    let path = cfg.out_dir().join(REGIONS_FILE);
    let file: RegionsFile = read_json(&path)?;
    file.stamp.check(&path, Some(&cfg.hash()))?;
    Ok(file)
}

pub fn read_categories(cfg: &RunConfig) -> Result<CategoryTable> {
    let out = cfg.out_dir();
    let path = out.join(CATEGORIES_FILE);
    let file: CategoriesFile = read_json(&path)?;
    file.stamp.check(&path, Some(&cfg.hash()))?;
    let vocab = vocabulary(file.categories.iter().map(|c| (c.name.clone(), c.supercategory.clone())))?;
    if vocab != file.categories {
        return Err(Error::Format { path, message: "category list is not a normalized vocabulary".into() });
    }
    CategoryTable::from_tensor(vocab, &Tensor::load(out.join(&file.table))?)
}

/// Region -> category of the GT box it overlaps most; "something else" when it overlaps none.
pub fn planted_assignment(
    regions: &RegionsFile,
    annotations: &Annotations,
    table: &CategoryTable,
) -> Result<BTreeMap<RegionKey, usize>> {
    let fallback = table
        .something_else()
        .ok_or_else(|| Error::invalid("category table has no \"something else\" row"))?;
    let mut out = BTreeMap::new();
    for img in &regions.images {
        let gts: Vec<_> = annotations.ground_truth.iter().filter(|g| g.image_id == img.image_id).collect();
        for r in &img.regions {
            let best = gts
                .iter()
                .map(|g| (r.bbox.iou(&g.bbox), g.category_index))
                .fold(None, |best: Option<(f64, usize)>, cand| match best {
                    Some(b) if b.0 >= cand.0 => Some(b),
                    _ => Some(cand),
                });
            let category = match best {
                Some((iou, gt_index)) if iou > 0.0 => {
                    let name = &annotations.vocabulary[gt_index].name;
                    table.index_of(name).ok_or_else(|| {
                        Error::Integrity(format!("GT category {name:?} is missing from the recognition vocabulary"))
                    })?
                }
                _ => fallback,
            };
            out.insert(RegionKey { image_id: img.image_id, region_id: r.region_id }, category);
        }
    }
    Ok(out)
}

fn image_encoder(cfg: &RunConfig, regions: &RegionsFile, table: &CategoryTable) -> Result<Arc<dyn Encoder>> {
    Ok(match cfg.encoder {
        EncoderKind::Mock => Arc::new(MockEncoder::new(cfg.seed)),
        EncoderKind::Planted => {
            let annotations = load_annotations(cfg)?.ok_or_else(|| Error::Config("the planted encoder needs annotations".into()))?;
            let assignment = planted_assignment(regions, &annotations, table)?;
            Arc::new(PlantedMock::new(MockEncoder::new(cfg.seed), table.embeddings.clone(), assignment, cfg.planted_noise)?)
        }
        EncoderKind::ClipCache => Arc::new(open_cache(cfg)?),
        EncoderKind::Mlp => {
            let dir = cfg.checkpoint_dir().ok_or_else(|| Error::Config("the mlp encoder needs mlp_checkpoint".into()))?;
            let (params, meta) = load_checkpoint(&dir)?;
            let input = meta.dims.input;
            let shape = if input == FEATURE_SHAPE.iter().product::<usize>() { FEATURE_SHAPE } else { [1, 1, input] };
            let backend: Arc<dyn Encoder> = match cfg.cache_root() {
                Some(root) => Arc::new(CacheEncoder::open(root)?.with_feature_shape(shape)),
                None => Arc::new(MockEncoder::new(cfg.seed).with_feature_shape(shape)),
            };
            Arc::new(MlpImageEncoder::new(Arc::new(params), backend))
        }
    })
}

pub fn embedding_name(image_id: u64) -> String {
    format!("{EMBEDDINGS_DIR}/{image_id}.ovt")
}

/// Crops to region embeddings: one N x D tensor per image plus `embeddings.json`.
pub fn stage_embed_image(cfg: &RunConfig) -> Result<EmbeddingsFile> {
    let out = cfg.out_dir();
    create_dir(&out.join(EMBEDDINGS_DIR))?;
    let regions = read_regions(cfg)?;
    let table = read_categories(cfg)?;
    let encoder = image_encoder(cfg, &regions, &table)?;
    let dim = table.dim();
    let records = regions
        .images
        .par_iter()
        .map(|img| {
            let err = wrap(img.image_id, "embed-image");
            let mut data = Vec::with_capacity(img.regions.len() * dim);
            for r in &img.regions {
                let patch = load_rgb(&out.join(&r.crop)).map_err(&err)?;
                let key = RegionKey { image_id: img.image_id, region_id: r.region_id };
                let e = encoder.encode_image(key, &patch).map_err(&err)?;
                if e.dim() != dim {
                    return Err(err(Error::invalid(format!(
                        "region {key} embedded in {} dims, categories in {dim}",
                        e.dim()
                    ))));
                }
                data.extend_from_slice(e.values());
            }
            let file = embedding_name(img.image_id);
            Tensor::f32(vec![img.regions.len(), dim], data)
                .and_then(|t| t.save(out.join(&file)))
                .map_err(&err)?;
            Ok(EmbeddingRecord { image_id: img.image_id, file, regions: img.regions.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = EmbeddingsFile { stamp: Stamp::of(cfg), dim, preprocessing: encoder.preprocessing(), images: records };
    write_json(&out.join(EMBEDDINGS_FILE), &file)?;
    Ok(file)
}

/// Per-image object embeddings, in `regions.json` order.
pub fn read_embeddings(cfg: &RunConfig, regions: &RegionsFile) -> Result<Vec<Vec<Embedding>>> {
    let out = cfg.out_dir();
    let path = out.join(EMBEDDINGS_FILE);
    let file: EmbeddingsFile = read_json(&path)?;
    file.stamp.check(&path, Some(&cfg.hash()))?;
    let by_id: BTreeMap<u64, &EmbeddingRecord> = file.images.iter().map(|r| (r.image_id, r)).collect();
    regions
        .images
        .iter()
        .map(|img| {
            let rec = by_id.get(&img.image_id).ok_or_else(|| Error::Format {
                path: path.clone(),
                message: format!("no embeddings for image {}", img.image_id),
            })?;
            let tpath = out.join(&rec.file);
            let t = Tensor::load(&tpath)?;
            let values = t
                .as_f32()
                .filter(|_| t.dims == [img.regions.len(), file.dim])
                .ok_or_else(|| Error::Format {
                    path: tpath.clone(),
                    message: format!("expected f32 {}x{}, found {:?}", img.regions.len(), file.dim, t.dims),
                })?;
            Ok(values.chunks_exact(file.dim.max(1)).take(img.regions.len()).map(|c| Embedding::from_raw(c.to_vec())).collect())
        })
        .collect()
}

fn rows(embeddings: &[Embedding], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(embeddings.len(), dim, |i, j| f64::from(embeddings[i].values()[j]))
}

/// Default k: categories other than "something else".
pub fn default_k(table: &CategoryTable) -> usize {
    table.len() - usize::from(table.something_else().is_some())
}

/// Object and category representations for one image.
pub struct Representations {
    pub objects: DMatrix<f64>,
    pub categories: DMatrix<f64>,
    pub metric: Similarity,
}

/// Raw embeddings, or latent SVD scores when the projection is on.
/// Also returns the score matrices for the debug dump.
pub fn representations(
    cfg: &RunConfig,
    table: &CategoryTable,
    objects: &[Vec<Embedding>],
    image_ids: &[u64],
) -> Result<(Vec<Representations>, Vec<(String, DMatrix<f64>)>, usize)> {
    let dim = table.dim();
    if !cfg.svd {
        let cats = rows(&table.embeddings, dim);
        let reps = objects
            .iter()
            .map(|o| Representations { objects: rows(o, dim), categories: cats.clone(), metric: Similarity::Cosine })
            .collect();
        return Ok((reps, Vec::new(), 0));
    }
    let k = cfg.k.unwrap_or_else(|| default_k(table));
    let c = table.len();
    match cfg.svd_scope {
        SvdScope::PerImage => {
            let results = objects
                .par_iter()
                .zip(image_ids)
                .map(|(o, &id)| {
                    let err = wrap(id, "project");
                    if o.is_empty() {
                        return Ok((
                            Representations { objects: DMatrix::zeros(0, 1), categories: DMatrix::zeros(c, 1), metric: cfg.similarity },
                            None,
                            0,
                        ));
                    }
                    let latent = svd_project(&concat(o, &table.embeddings).map_err(&err)?, k).map_err(&err)?;
                    let (obj, cat) = split_scores(latent.scores(), o.len(), c).map_err(&err)?;
                    let kk = latent.k();
                    Ok((
                        Representations { objects: obj, categories: cat, metric: cfg.similarity },
                        Some((format!("{SCORES_DIR}/{id}.ovt"), latent.svd.scores)),
                        kk,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let k_used = results.iter().map(|r| r.2).max().unwrap_or(0);
            let mut reps = Vec::new();
            let mut dumps = Vec::new();
            for (r, d, _) in results {
                reps.push(r);
                dumps.extend(d);
            }
            Ok((reps, dumps, k_used))
        }
        SvdScope::Dataset => {
            let all: Vec<Embedding> = objects.iter().flatten().cloned().collect();
            if all.is_empty() {
                let reps = objects
                    .iter()
                    .map(|_| Representations { objects: DMatrix::zeros(0, 1), categories: DMatrix::zeros(c, 1), metric: cfg.similarity })
                    .collect();
                return Ok((reps, Vec::new(), 0));
            }
            let latent = svd_project(&concat(&all, &table.embeddings)?, k)?;
            let (obj, cat) = split_scores(latent.scores(), all.len(), c)?;
            let mut start = 0;
            let reps = objects
                .iter()
                .map(|o| {
                    let block = obj.rows(start, o.len()).into_owned();
                    start += o.len();
                    Representations { objects: block, categories: cat.clone(), metric: cfg.similarity }
                })
                .collect();
            let k_used = latent.k();
            Ok((reps, vec![(format!("{SCORES_DIR}/dataset.ovt"), latent.svd.scores)], k_used))
        }
    }
}

/// Debug dump of the latent scores; a no-op when the projection is off.
pub fn stage_project(cfg: &RunConfig) -> Result<Option<ScoresFile>> {
    if !cfg.svd {
        log::info!("svd is off; nothing to project");
        return Ok(None);
    }
    let out = cfg.out_dir();
    create_dir(&out.join(SCORES_DIR))?;
    let regions = read_regions(cfg)?;
    let table = read_categories(cfg)?;
    let objects = read_embeddings(cfg, &regions)?;
    let ids: Vec<u64> = regions.images.iter().map(|i| i.image_id).collect();
    let (_, dumps, k) = representations(cfg, &table, &objects, &ids)?;
    let mut files = Vec::new();
    for (name, scores) in dumps {
        let (r, c) = scores.shape();
        let data: Vec<f32> = scores.transpose().as_slice().iter().map(|&v| v as f32).collect();
        Tensor::f32(vec![r, c], data)?.save(out.join(&name))?;
        files.push(name);
    }
    let file = ScoresFile { stamp: Stamp::of(cfg), k, scope: cfg.svd_scope, files };
    write_json(&out.join(SCORES_FILE), &file)?;
    Ok(Some(file))
}

/// Similarity, softmax and θ for every region; writes `predictions.jsonl`.
pub fn stage_match(cfg: &RunConfig) -> Result<Vec<PredictionLine>> {
    let out = cfg.out_dir();
    let regions = read_regions(cfg)?;
    let table = read_categories(cfg)?;
    let objects = read_embeddings(cfg, &regions)?;
    let ids: Vec<u64> = regions.images.iter().map(|i| i.image_id).collect();
    let (reps, _, _) = representations(cfg, &table, &objects, &ids)?;
    let names = table.names();
    let per_image = regions
        .images
        .par_iter()
        .zip(reps.par_iter())
        .map(|(img, rep)| {
            if img.regions.is_empty() {
                return Ok(Vec::new());
            }
            let boxes: Vec<(usize, BBox)> = img.regions.iter().map(|r| (r.region_id, r.bbox)).collect();
            let preds = predict(img.image_id, &boxes, &rep.objects, &rep.categories, cfg.theta, rep.metric)
                .map_err(wrap(img.image_id, "match"))?;
            Ok(preds.iter().map(|p| PredictionLine::from_prediction(p, &names)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let lines: Vec<PredictionLine> = per_image.into_iter().flatten().collect();
    write_predictions(&out.join(PREDICTIONS_FILE), &Stamp::of(cfg), &lines)?;
    Ok(lines)
}

pub fn write_predictions(path: &Path, stamp: &Stamp, lines: &[PredictionLine]) -> Result<()> {
    let mut buf = Vec::new();
    let header = PredictionsHeader { kind: PREDICTIONS_KIND.to_string(), stamp: stamp.clone() };
    let io = |e: std::io::Error| Error::io(path, e);
    writeln!(buf, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for line in lines {
        writeln!(buf, "{}", serde_json::to_string(line).expect("prediction serializes")).map_err(io)?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a predictions file; returns its stamp and records.
pub fn read_predictions(path: &Path) -> Result<(Stamp, Vec<PredictionLine>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let fmt = |n: usize, m: String| Error::Format { path: path.to_path_buf(), message: format!("line {n}: {m}") };
    let first = lines.next().ok_or_else(|| fmt(1, "empty file".into()))?.map_err(|e| Error::io(path, e))?;
    let header: PredictionsHeader = serde_json::from_str(&first).map_err(|e| fmt(1, e.to_string()))?;
    if header.kind != PREDICTIONS_KIND {
        return Err(fmt(1, format!("not a predictions file (kind {:?})", header.kind)));
    }
    header.stamp.check(path, None)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| fmt(i + 2, e.to_string()))?);
    }
    Ok((header.stamp, out))
}

/// Echo of the settings that shaped the report.
fn config_echo(cfg: &RunConfig, k_effective: Option<usize>) -> Value {
    let mut v = cfg.canonical_json();
    if let Some(obj) = v.as_object_mut() {
        obj.insert("k_effective".into(), json!(k_effective));
    }
    v
}

/// Predictions plus annotations to `report.json` and `metrics.csv`.
pub fn stage_evaluate(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.out_dir();
    let annotations = load_annotations(cfg)?.ok_or_else(|| Error::Config("evaluation needs annotations".into()))?;
    let pred_path = out.join(PREDICTIONS_FILE);
    let (stamp, lines) = read_predictions(&pred_path)?;
    if stamp.config_hash != cfg.hash() {
        log::warn!("{} was written under config {}", pred_path.display(), stamp.config_hash);
    }

    // GT categories first, then any extra predicted names, then "something else".
    let mut names: Vec<(String, String)> =
        annotations.vocabulary.iter().map(|c| (c.name.clone(), c.supercategory.clone())).collect();
    for l in &lines {
        if l.category != DISCARDED && !names.iter().any(|(n, _)| n == &l.category) {
            names.push((l.category.clone(), crate::prompts::DEFAULT_SUPERCATEGORY.to_string()));
        }
    }
    let vocab = vocabulary(names)?;
    let index_of = |n: &str| vocab.iter().position(|c| c.name == n);
    let gt_index: Vec<usize> = annotations
        .vocabulary
        .iter()
        .map(|c| index_of(&c.name).expect("GT names are in the vocabulary"))
        .collect();
    let gts: Vec<_> = annotations
        .ground_truth
        .iter()
        .map(|g| crate::eval::GroundTruth { category_index: gt_index[g.category_index], ..*g })
        .collect();
    let detections: Vec<Detection> = lines
        .iter()
        .map(|l| Detection {
            image_id: l.image_id,
            region_id: l.region_id,
            bbox: l.bbox,
            category: if l.category == DISCARDED { None } else { index_of(&l.category) },
            probability: l.probability,
        })
        .collect();
    let params = MatchParams {
        mode: cfg.match_mode,
        iou_threshold: cfg.iou_threshold,
        something_else: cfg.something_else,
        something_else_index: index_of(crate::prompts::SOMETHING_ELSE),
    };
    let metrics = evaluate(&detections, &gts, &vocab, &params)?;
    let k_effective = if cfg.svd {
        cfg.k.or_else(|| read_categories(cfg).ok().map(|t| default_k(&t)))
    } else {
        None
    };
    let report = build_report(&metrics, &config_echo(cfg, k_effective), &cfg.hash());
    write_json(&out.join(REPORT_FILE), &report)?;
    std::fs::write(out.join(METRICS_CSV_FILE), metrics_csv(&report)?).map_err(|e| Error::io(out.join(METRICS_CSV_FILE), e))?;
    Ok(report)
}

/// Table CSV from `report.json` (when present) and one overlay PNG per image.
pub fn stage_report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = cfg.out_dir();
    let report_path = out.join(REPORT_FILE);
    if report_path.is_file() {
        let report: Value = read_json(&report_path)?;
        let stamp: Stamp = serde_json::from_value(report.clone())
            .map_err(|e| Error::Format { path: report_path.clone(), message: e.to_string() })?;
        stamp.check(&report_path, None)?;
        let csv = out.join(METRICS_CSV_FILE);
        std::fs::write(&csv, metrics_csv(&report)?).map_err(|e| Error::io(&csv, e))?;
    }
    let regions = read_regions(cfg)?;
    let (_, lines) = read_predictions(&out.join(PREDICTIONS_FILE))?;
    let dir = out.join(OVERLAYS_DIR);
    create_dir(&dir)?;
    regions
        .images
        .par_iter()
        .map(|img| {
            let err = wrap(img.image_id, "report");
            let base = load_rgb(&cfg.images_dir().join(&img.file_name)).map_err(&err)?;
            let labels: Vec<Label> = lines
                .iter()
                .filter(|l| l.image_id == img.image_id)
                .filter_map(|l| {
                    l.category_index.map(|c| Label {
                        bbox: l.bbox,
                        text: format!("{} {:.2}", l.category, l.probability),
                        category_index: c,
                    })
                })
                .collect();
            let path = dir.join(format!("{}.png", img.image_id));
            save_png(&overlay::render(&base, &labels), &path).map_err(&err)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub images: usize,
    pub regions: usize,
    pub predictions: usize,
    pub report: Option<Value>,
}

/// All stages in order. Evaluation runs only when annotations are configured.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    create_dir(&cfg.out_dir())?;
    let regions = stage_localize(cfg)?;
    stage_embed_text(cfg)?;
    stage_embed_image(cfg)?;
    stage_project(cfg)?;
    let predictions = stage_match(cfg)?;
    let report = if cfg.annotations.is_some() { Some(stage_evaluate(cfg)?) } else { None };
    stage_report(cfg)?;
    Ok(RunSummary {
        images: regions.images.len(),
        regions: regions.images.iter().map(|i| i.regions.len()).sum(),
        predictions: predictions.len(),
        report,
    })
}
