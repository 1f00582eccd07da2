//! Category vocabularies, prompt templates and the averaged phrase embedding.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, Encoder};
use crate::error::{Error, Result};
use crate::ovt::Tensor;

pub const SOMETHING_ELSE: &str = "something else";
pub const DEFAULT_SUPERCATEGORY: &str = "object";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub supercategory: String,
    pub index: usize,
}

#[derive(Debug, Deserialize)]
struct VocabEntry {
    name: String,
    #[serde(default)]
    supercategory: Option<String>,
}

/// Normalizes a list of (name, supercategory) pairs into a vocabulary:
/// dense indices, and a single trailing "something else" entry.
pub fn vocabulary<I, S1, S2>(entries: I) -> Result<Vec<CategorySpec>>
where
    I: IntoIterator<Item = (S1, S2)>,
    S1: Into<String>,
    S2: Into<String>,
{
    let mut out: Vec<CategorySpec> = Vec::new();
    let mut catch_all = None;
    for (name, supercategory) in entries {
        let name = name.into();
        let supercategory = supercategory.into();
        if name.is_empty() {
            return Err(Error::invalid("category name must be non-empty"));
        }
        if out.iter().any(|c| c.name == name) {
            return Err(Error::invalid(format!("duplicate category {name:?}")));
        }
        if name == SOMETHING_ELSE {
            catch_all = Some(supercategory);
            continue;
        }
        out.push(CategorySpec { index: out.len(), name, supercategory });
    }
    if out.is_empty() {
        return Err(Error::invalid("vocabulary has no categories"));
    }
    out.push(CategorySpec {
        index: out.len(),
        name: SOMETHING_ELSE.to_string(),
        supercategory: catch_all.unwrap_or_else(|| DEFAULT_SUPERCATEGORY.to_string()),
    });
    Ok(out)
}

/// Reads a JSON array of `{"name", "supercategory"}` objects.
pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vec<CategorySpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<VocabEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    vocabulary(
        entries
            .into_iter()
            .map(|e| (e.name, e.supercategory.unwrap_or_else(|| DEFAULT_SUPERCATEGORY.to_string()))),
    )
}

/// The three prompt templates, applied verbatim.
pub fn build_prompts(category: &CategorySpec) -> [String; 3] {
    let (name, sup) = (&category.name, &category.supercategory);
    [
        format!("a photo of a {sup} such as {name}"),
        format!("this is a {name} of a {sup}"),
        format!("a photo of {name}"),
    ]
}

/// Mean of three unit embeddings, re-normalized.
pub fn avg_phrase(rows: &[Embedding; 3]) -> Result<Embedding> {
    let dim = rows[0].dim();
    for (i, r) in rows.iter().enumerate() {
        if r.dim() != dim {
            return Err(Error::invalid(format!("phrase {i} has dim {}, expected {dim}", r.dim())));
        }
        if (r.norm() - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("phrase {i} is not unit-norm (norm {})", r.norm())));
        }
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r.values()[j] as f64).sum::<f64>() / 3.0)
        .collect();
    Embedding::normalized(&mean, 1e-8)
        .ok_or_else(|| Error::DegenerateEmbedding("averaged phrase embeddings cancel out".into()))
}

/// Which text representation stands for a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhraseMode {
    #[default]
    Avg,
    Phrase1,
    Phrase2,
    Phrase3,
}

/// Category embeddings; row `i` belongs to vocabulary index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTable {
    pub categories: Vec<CategorySpec>,
    pub embeddings: Vec<Embedding>,
}

impl CategoryTable {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Embedding::dim)
    }

    pub fn names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn something_else(&self) -> Option<usize> {
        self.index_of(SOMETHING_ELSE)
    }

    /// Rows as a C x D f32 tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.embeddings.iter().flat_map(|e| e.values().iter().copied()).collect();
        Tensor::f32(vec![self.len(), self.dim()], data).expect("rows share one dim")
    }

    pub fn from_tensor(categories: Vec<CategorySpec>, tensor: &Tensor) -> Result<Self> {
        let data = tensor.as_f32().ok_or_else(|| Error::invalid("category table must be f32"))?;
        if tensor.dims.len() != 2 || tensor.dims[0] != categories.len() {
            return Err(Error::invalid(format!(
                "category table dims {:?} do not match {} categories",
                tensor.dims,
                categories.len()
            )));
        }
        let dim = tensor.dims[1];
        let embeddings = data.chunks_exact(dim.max(1)).map(|c| Embedding::from_raw(c.to_vec())).collect();
        Ok(CategoryTable { categories, embeddings })
    }
}

/// Encodes every category's prompts and stores the chosen representation.
pub fn build_category_table(
    vocab: &[CategorySpec],
    encoder: &dyn Encoder,
    mode: PhraseMode,
) -> Result<CategoryTable> {
    let categories = vocabulary(vocab.iter().map(|c| (c.name.clone(), c.supercategory.clone())))?;
    let embeddings = categories
        .par_iter()
        .map(|cat| {
            let wrap = |source: Error| Error::Category { category: cat.name.clone(), source: Box::new(source) };
            let prompts = build_prompts(cat);
            let encode = |i: usize| encoder.encode_text(&prompts[i]).map_err(wrap);
            match mode {
                PhraseMode::Avg => avg_phrase(&[encode(0)?, encode(1)?, encode(2)?]).map_err(wrap),
                PhraseMode::Phrase1 => encode(0),
                PhraseMode::Phrase2 => encode(1),
                PhraseMode::Phrase3 => encode(2),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CategoryTable { categories, embeddings })
}
