//! Ground truth ingestion, prediction matching and the class-wise / image-wise metrics.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::prompts::{vocabulary, CategorySpec, DEFAULT_SUPERCATEGORY};
use crate::regions::BBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub category_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub height: Option<usize>,
    pub width: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    /// Categories in file order, then "something else".
    pub vocabulary: Vec<CategorySpec>,
    pub images: Vec<ImageInfo>,
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<ImageInfo>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: i64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
    #[serde(default)]
    supercategory: Option<String>,
}

/// COCO `(x, y, w, h)` to the inclusive pixel box it covers.
pub fn coco_bbox(xywh: [f64; 4]) -> Result<BBox> {
    let [x, y, w, h] = xywh;
    if !xywh.iter().all(|v| v.is_finite()) || x < 0.0 || y < 0.0 || w <= 0.0 || h <= 0.0 {
        return Err(Error::Integrity(format!("invalid COCO bbox {xywh:?}")));
    }
    let max_col = ((x + w).ceil() as usize).saturating_sub(1).max(x.floor() as usize);
    let max_row = ((y + h).ceil() as usize).saturating_sub(1).max(y.floor() as usize);
    BBox::new(y.floor() as usize, x.floor() as usize, max_row, max_col)
}

/// Inverse of [`coco_bbox`] for integral boxes.
pub fn to_coco_bbox(b: &BBox) -> [f64; 4] {
    [b.min_col as f64, b.min_row as f64, b.width() as f64, b.height() as f64]
}

pub fn parse_coco_annotations(text: &str, origin: &Path) -> Result<Annotations> {
    let file: CocoFile =
        serde_json::from_str(text).map_err(|e| Error::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
    let vocab = vocabulary(file.categories.iter().map(|c| {
        (c.name.clone(), c.supercategory.clone().unwrap_or_else(|| DEFAULT_SUPERCATEGORY.to_string()))
    }))?;
    let by_id: HashMap<i64, usize> = file
        .categories
        .iter()
        .map(|c| (c.id, vocab.iter().position(|v| v.name == c.name).expect("name is in the vocabulary")))
        .collect();
    let ground_truth = file
        .annotations
        .iter()
        .map(|a| {
            let category_index = *by_id.get(&a.category_id).ok_or_else(|| {
                Error::Integrity(format!("annotation on image {} references unknown category {}", a.image_id, a.category_id))
            })?;
            Ok(GroundTruth { image_id: a.image_id, bbox: coco_bbox(a.bbox)?, category_index })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Annotations { vocabulary: vocab, images: file.images, ground_truth })
}

pub fn load_coco_annotations(path: impl AsRef<Path>) -> Result<Annotations> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_annotations(&text, path)
}

/// A prediction as seen by the evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub region_id: usize,
    pub bbox: BBox,
    /// `None` for discarded predictions.
    pub category: Option<usize>,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// Greedy IoU matching against the threshold.
    #[default]
    Iou,
    /// A prediction matches only a GT box equal to its own.
    RegionIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SomethingElsePolicy {
    /// Treated like a discarded prediction.
    #[default]
    Abstain,
    /// Takes part in matching and always counts as a false positive.
    Fp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub mode: MatchMode,
    pub iou_threshold: f64,
    pub something_else: SomethingElsePolicy,
    /// Vocabulary index of "something else", if present.
    pub something_else_index: Option<usize>,
}

impl MatchParams {
    pub fn new(something_else_index: Option<usize>) -> Self {
        MatchParams {
            mode: MatchMode::Iou,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            something_else: SomethingElsePolicy::Abstain,
            something_else_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Tp,
    /// Unmatched prediction.
    Fp,
    /// Matched a GT of another class: FP for the prediction, FN for the GT.
    Mismatch,
    /// Unmatched GT.
    Fn,
    /// Discarded, or "something else" under the abstain policy.
    Abstain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub image_id: u64,
    /// Index into the detection slice.
    pub detection: Option<usize>,
    /// Index into the ground-truth slice.
    pub ground_truth: Option<usize>,
    pub outcome: Outcome,
}

/// Greedy per-image matching. Every GT index appears in exactly one record.
pub fn match_to_gt(detections: &[Detection], gts: &[GroundTruth], params: &MatchParams) -> Result<Vec<MatchRecord>> {
    if !(params.iou_threshold > 0.0 && params.iou_threshold <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold must lie in (0, 1], got {}", params.iou_threshold)));
    }
    let mut by_image: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        by_image.entry(d.image_id).or_default().0.push(i);
    }
    for (j, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().1.push(j);
    }

    let abstains = |d: &Detection| match d.category {
        None => true,
        Some(c) => params.something_else == SomethingElsePolicy::Abstain && Some(c) == params.something_else_index,
    };

    let mut records = Vec::with_capacity(detections.len() + gts.len());
    for (&image_id, (dets, img_gts)) in &by_image {
        let mut order = dets.clone();
        order.sort_by(|&a, &b| {
            let (da, db) = (&detections[a], &detections[b]);
            db.probability.total_cmp(&da.probability).then(da.region_id.cmp(&db.region_id)).then(a.cmp(&b))
        });
        let mut taken = vec![false; img_gts.len()];
        for &di in &order {
            let d = &detections[di];
            if abstains(d) {
                records.push(MatchRecord { image_id, detection: Some(di), ground_truth: None, outcome: Outcome::Abstain });
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (slot, &gj) in img_gts.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                let iou = match params.mode {
                    MatchMode::Iou => d.bbox.iou(&gts[gj].bbox),
                    MatchMode::RegionIdentity => {
                        if d.bbox == gts[gj].bbox {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                let eligible = match params.mode {
                    MatchMode::Iou => iou >= params.iou_threshold,
                    MatchMode::RegionIdentity => iou == 1.0,
                };
                if eligible && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((slot, iou));
                }
            }
            let record = match best {
                Some((slot, _)) => {
                    taken[slot] = true;
                    let gj = img_gts[slot];
                    let outcome = if d.category == Some(gts[gj].category_index) { Outcome::Tp } else { Outcome::Mismatch };
                    MatchRecord { image_id, detection: Some(di), ground_truth: Some(gj), outcome }
                }
                None => MatchRecord { image_id, detection: Some(di), ground_truth: None, outcome: Outcome::Fp },
            };
            records.push(record);
        }
        for (slot, &gj) in img_gts.iter().enumerate() {
            if !taken[slot] {
                records.push(MatchRecord { image_id, detection: None, ground_truth: Some(gj), outcome: Outcome::Fn });
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Rates {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// P, R, Acc = TP/(TP+FP+FN), F1, with 0/0 = 0.
pub fn rates(tp: usize, fp: usize, fn_: usize) -> Rates {
    let (precision, recall) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    Rates { precision, recall, accuracy: ratio(tp, tp + fp + fn_), f1: f1(precision, recall) }
}

/// All-points AP over outcomes already sorted by rank: Σ precision at each TP / `n_gt`.
pub fn ranked_ap(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &tp) in ranked_tp.iter().enumerate() {
        if tp {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / n_gt as f64
}

/// Ranking key: probability descending, then image, then region.
fn rank_detections(detections: &[Detection], mut ids: Vec<usize>) -> Vec<usize> {
    ids.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.probability
            .total_cmp(&da.probability)
            .then(da.image_id.cmp(&db.image_id))
            .then(da.region_id.cmp(&db.region_id))
            .then(a.cmp(&b))
    });
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub index: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt: usize,
    #[serde(flatten)]
    pub rates: Rates,
    /// Fraction in [0, 1]; `None` when the class has no GT.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    #[serde(flatten)]
    pub rates: Rates,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub mismatched: usize,
    pub ground_truth: usize,
    pub predictions: usize,
    pub abstained: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub classwise: Summary,
    pub imagewise: Summary,
    pub counts: Counts,
}

/// Per-class tallies and AP for every real class (never "something else").
pub fn classwise_metrics(
    records: &[MatchRecord],
    detections: &[Detection],
    gts: &[GroundTruth],
    vocab: &[CategorySpec],
    something_else_index: Option<usize>,
) -> (Vec<ClassMetrics>, Summary) {
    let mut per_class: Vec<ClassMetrics> = vocab
        .iter()
        .filter(|c| Some(c.index) != something_else_index)
        .map(|c| ClassMetrics {
            name: c.name.clone(),
            index: c.index,
            tp: 0,
            fp: 0,
            fn_: 0,
            gt: 0,
            rates: Rates::default(),
            ap: None,
        })
        .collect();
    let slot: HashMap<usize, usize> = per_class.iter().enumerate().map(|(s, c)| (c.index, s)).collect();
    for g in gts {
        if let Some(&s) = slot.get(&g.category_index) {
            per_class[s].gt += 1;
        }
    }
    let mut outcome_of = vec![None; detections.len()];
    for r in records {
        let pred = r.detection.and_then(|d| detections[d].category).and_then(|c| slot.get(&c).copied());
        let truth = r.ground_truth.and_then(|g| slot.get(&gts[g].category_index).copied());
        match r.outcome {
            Outcome::Tp => per_class[pred.expect("TP has a real class")].tp += 1,
            Outcome::Fp => {
                if let Some(s) = pred {
                    per_class[s].fp += 1;
                }
            }
            Outcome::Mismatch => {
                if let Some(s) = pred {
                    per_class[s].fp += 1;
                }
                if let Some(s) = truth {
                    per_class[s].fn_ += 1;
                }
            }
            Outcome::Fn => {
                if let Some(s) = truth {
                    per_class[s].fn_ += 1;
                }
            }
            Outcome::Abstain => {}
        }
        if let Some(d) = r.detection {
            outcome_of[d] = Some(r.outcome);
        }
    }
    for class in per_class.iter_mut() {
        class.rates = rates(class.tp, class.fp, class.fn_);
        if class.gt > 0 {
            let ids: Vec<usize> = (0..detections.len())
                .filter(|&d| {
                    detections[d].category == Some(class.index) && outcome_of[d].is_some_and(|o| o != Outcome::Abstain)
                })
                .collect();
            let ranked: Vec<bool> =
                rank_detections(detections, ids).into_iter().map(|d| outcome_of[d] == Some(Outcome::Tp)).collect();
            class.ap = Some(ranked_ap(&ranked, class.gt));
        }
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.gt > 0).collect();
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    let summary = Summary {
        rates: Rates {
            precision: mean(&|c| c.rates.precision),
            recall: mean(&|c| c.rates.recall),
            accuracy: mean(&|c| c.rates.accuracy),
            f1: mean(&|c| c.rates.f1),
        },
        ap: mean(&|c| c.ap.unwrap_or(0.0)),
    };
    (per_class, summary)
}

/// Pooled counts over all records. Accuracy is TP over the distinct events
/// (a mismatch is one event, not an FP plus an FN).
pub fn imagewise_metrics(records: &[MatchRecord], detections: &[Detection], n_gt: usize) -> (Summary, Counts) {
    let count = |o: Outcome| records.iter().filter(|r| r.outcome == o).count();
    let (tp, fp_only, mismatched, fn_only, abstained) =
        (count(Outcome::Tp), count(Outcome::Fp), count(Outcome::Mismatch), count(Outcome::Fn), count(Outcome::Abstain));
    let (fp, fn_) = (fp_only + mismatched, fn_only + mismatched);
    let (precision, recall) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let ranked_ids: Vec<usize> = records
        .iter()
        .filter(|r| r.outcome != Outcome::Abstain)
        .filter_map(|r| r.detection)
        .collect();
    let is_tp: HashMap<usize, bool> =
        records.iter().filter_map(|r| r.detection.map(|d| (d, r.outcome == Outcome::Tp))).collect();
    let ranked: Vec<bool> = rank_detections(detections, ranked_ids).into_iter().map(|d| is_tp[&d]).collect();
    let summary = Summary {
        rates: Rates {
            precision,
            recall,
            accuracy: ratio(tp, tp + fp_only + fn_only + mismatched),
            f1: f1(precision, recall),
        },
        ap: ranked_ap(&ranked, n_gt),
    };
    let counts = Counts {
        tp,
        fp,
        fn_,
        mismatched,
        ground_truth: n_gt,
        predictions: detections.len(),
        abstained,
    };
    (summary, counts)
}

/// Matches and scores in one call.
pub fn evaluate(
    detections: &[Detection],
    gts: &[GroundTruth],
    vocab: &[CategorySpec],
    params: &MatchParams,
) -> Result<Metrics> {
    for g in gts {
        if g.category_index >= vocab.len() || Some(g.category_index) == params.something_else_index {
            return Err(Error::Integrity(format!(
                "ground truth on image {} has category index {} outside the vocabulary",
                g.image_id, g.category_index
            )));
        }
    }
    if let Some(d) = detections.iter().find(|d| d.category.is_some_and(|c| c >= vocab.len())) {
        return Err(Error::Integrity(format!(
            "prediction {}:{} has category index {:?} outside the vocabulary",
            d.image_id, d.region_id, d.category
        )));
    }
    let records = match_to_gt(detections, gts, params)?;
    let (per_class, classwise) = classwise_metrics(&records, detections, gts, vocab, params.something_else_index);
    let (imagewise, counts) = imagewise_metrics(&records, detections, gts.len());
    Ok(Metrics { per_class, classwise, imagewise, counts })
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

fn summary_json(s: &Summary) -> Value {
    json!({
        "precision": s.rates.precision,
        "recall": s.rates.recall,
        "accuracy": s.rates.accuracy,
        "f1": s.rates.f1,
        "ap": s.ap * 100.0,
    })
}

/// Report with sorted keys and AP expressed as a percentage.
pub fn build_report(metrics: &Metrics, config: &Value, config_hash: &str) -> Value {
    let per_class: Vec<Value> = metrics
        .per_class
        .iter()
        .map(|c| {
            json!({
                "name": c.name,
                "index": c.index,
                "tp": c.tp,
                "fp": c.fp,
                "fn": c.fn_,
                "gt": c.gt,
                "precision": c.rates.precision,
                "recall": c.rates.recall,
                "accuracy": c.rates.accuracy,
                "f1": c.rates.f1,
                "ap": c.ap.map(|a| a * 100.0),
            })
        })
        .collect();
    json!({
        "format_version": REPORT_FORMAT_VERSION,
        "config_hash": config_hash,
        "config": config,
        "classwise": summary_json(&metrics.classwise),
        "imagewise": summary_json(&metrics.imagewise),
        "counts": metrics.counts,
        "per_class": per_class,
    })
}

/// Two-row table with the paper-style column headers.
pub fn metrics_csv(report: &Value) -> Result<String> {
    let mut out = String::from("setting,Avg Precision,Avg Recall,Accuracy,F1,AP\n");
    for setting in ["classwise", "imagewise"] {
        let s = &report[setting];
        let field = |k: &str| {
            s[k].as_f64().ok_or_else(|| Error::invalid(format!("report field {setting}.{k} is missing")))
        };
        out.push_str(&format!(
            "{setting},{:.4},{:.4},{:.4},{:.4},{:.2}\n",
            field("precision")?,
            field("recall")?,
            field("accuracy")?,
            field("f1")?,
            field("ap")?
        ));
    }
    Ok(out)
}
