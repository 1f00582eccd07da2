//! Object localization: segmentation label masks to cropped object regions.
//!
//! A mask is resized (nearest neighbour) onto the image grid, split into
//! connected components per label, filtered by area, boxed and cropped.

use std::path::Path;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ovt::Tensor;

/// Default minimum component area in pixels.
pub const DEFAULT_MIN_AREA: usize = 100;

/// A per-pixel segment id map; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("mask dimensions {height}x{width} must be positive")));
        }
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMask { height, width, labels })
    }

    /// Builds a mask from nested rows, mostly for tests.
    pub fn from_rows(rows: &[&[u32]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged mask rows"));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Reads a mask from a single-channel 8/16-bit PNG or an `i32` OVT tensor of shape HxW.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let is_ovt = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ovt"));
        if is_ovt {
            let tensor = Tensor::load(path)?;
            let fmt = |message: String| Error::Format { path: path.to_path_buf(), message };
            if tensor.dims.len() != 2 {
                return Err(fmt(format!("mask tensor must be 2-D, got dims {:?}", tensor.dims)));
            }
            let data = tensor
                .as_i32()
                .ok_or_else(|| fmt("mask tensor must have i32 payload".into()))?;
            let labels = data
                .iter()
                .map(|&v| u32::try_from(v).map_err(|_| fmt(format!("negative label {v}"))))
                .collect::<Result<Vec<_>>>()?;
            return Self::new(tensor.dims[0], tensor.dims[1], labels);
        }

        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let labels: Vec<u32> = match img {
            DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("mask must be single-channel, got {:?}", other.color()),
                })
            }
        };
        Self::new(height, width, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

impl std::str::FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            _ => Err(Error::invalid(format!("connectivity must be 4 or 8, got {s:?}"))),
        }
    }
}

/// A connected set of same-label pixels, stored in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Inclusive axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BBox {
    pub fn new(min_row: usize, min_col: usize, max_row: usize, max_col: usize) -> Result<Self> {
        if min_row > max_row || min_col > max_col {
            return Err(Error::invalid(format!(
                "inverted bbox ({min_row},{min_col},{max_row},{max_col})"
            )));
        }
        Ok(BBox { min_row, min_col, max_row, max_col })
    }

    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }

    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    /// Intersection over union on inclusive pixel boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let top = self.min_row.max(other.min_row);
        let left = self.min_col.max(other.min_col);
        let bottom = self.max_row.min(other.max_row);
        let right = self.max_col.min(other.max_col);
        if top > bottom || left > right {
            return 0.0;
        }
        let inter = ((bottom - top + 1) * (right - left + 1)) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }
}

/// A localized object ready for embedding.
#[derive(Debug, Clone)]
pub struct Region {
    pub region_id: usize,
    pub bbox: BBox,
    pub component: Component,
    pub patch: RgbImage,
}

/// Nearest-neighbour resize; labels are never interpolated.
pub fn resize_mask(mask: &LabelMask, target_h: usize, target_w: usize) -> Result<LabelMask> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid(format!("target size {target_h}x{target_w} must be positive")));
    }
    if target_h == mask.height && target_w == mask.width {
        return Ok(mask.clone());
    }
    let mut labels = Vec::with_capacity(target_h * target_w);
    for r in 0..target_h {
        let src_r = r * mask.height / target_h;
        for c in 0..target_w {
            let src_c = c * mask.width / target_w;
            labels.push(mask.get(src_r, src_c));
        }
    }
    LabelMask::new(target_h, target_w, labels)
}

/// Splits a mask into components of equal label, ordered by
/// (label, min_row, min_col, first pixel in raster order).
pub fn connected_components(mask: &LabelMask, connectivity: Connectivity) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    let mut out = Vec::new();

    for start in 0..h * w {
        let label = mask.labels[start];
        if label == 0 || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            pixels.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if !visited[n] && mask.labels[n] == label {
                    visited[n] = true;
                    stack.push(n);
                }
            }
        }
        pixels.sort_unstable();
        out.push(Component { label, pixels });
    }

    out.sort_by_key(|comp| {
        let min_col = comp.pixels.iter().map(|p| p.1).min().unwrap_or(0);
        (comp.label, comp.pixels[0].0, min_col, comp.pixels[0])
    });
    out
}

pub fn filter_small(components: Vec<Component>, min_area: usize) -> Vec<Component> {
    components.into_iter().filter(|c| c.area() >= min_area).collect()
}

pub fn bounding_box(component: &Component) -> Result<BBox> {
    let mut it = component.pixels.iter();
    let &(r0, c0) = it
        .next()
        .ok_or_else(|| Error::invalid(format!("component with label {} is empty", component.label)))?;
    let init = BBox { min_row: r0, min_col: c0, max_row: r0, max_col: c0 };
    Ok(it.fold(init, |b, &(r, c)| BBox {
        min_row: b.min_row.min(r),
        min_col: b.min_col.min(c),
        max_row: b.max_row.max(r),
        max_col: b.max_col.max(c),
    }))
}

pub fn crop(image: &RgbImage, bbox: &BBox) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if bbox.min_row > bbox.max_row || bbox.min_col > bbox.max_col || bbox.max_row >= h || bbox.max_col >= w {
        return Err(Error::invalid(format!("bbox {bbox:?} outside {h}x{w} image")));
    }
    Ok(RgbImage::from_fn(bbox.width() as u32, bbox.height() as u32, |x, y| {
        *image.get_pixel(bbox.min_col as u32 + x, bbox.min_row as u32 + y)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizeParams {
    pub min_area: usize,
    pub connectivity: Connectivity,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        LocalizeParams { min_area: DEFAULT_MIN_AREA, connectivity: Connectivity::Eight }
    }
}

/// Runs the full localization chain for one image.
pub fn localize(image: &RgbImage, mask: &LabelMask, params: LocalizeParams) -> Result<Vec<Region>> {
    let aligned = resize_mask(mask, image.height() as usize, image.width() as usize)?;
    let components = filter_small(connected_components(&aligned, params.connectivity), params.min_area);
    components
        .into_iter()
        .enumerate()
        .map(|(region_id, component)| {
            let bbox = bounding_box(&component)?;
            let patch = crop(image, &bbox)?;
            Ok(Region { region_id, bbox, component, patch })
        })
        .collect()
}
