//! Run configuration: a single JSON file, optionally overridden field by field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::sha256_hex;
use crate::error::{Error, Result};
use crate::eval::{MatchMode, SomethingElsePolicy, DEFAULT_IOU_THRESHOLD};
use crate::matcher::Similarity;
use crate::prompts::PhraseMode;
use crate::regions::{Connectivity, DEFAULT_MIN_AREA};

/// Environment variable naming the embedding cache root.
pub const CACHE_DIR_ENV: &str = "OVOR_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    Mock,
    /// Mock whose image embeddings copy the text embedding of the overlapping GT class.
    Planted,
    ClipCache,
    Mlp,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown encoder {s:?} (expected mock, planted, clip-cache or mlp)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvdScope {
    /// One joint matrix per image: its objects plus all categories.
    #[default]
    PerImage,
    /// One joint matrix for every object in the run plus all categories.
    Dataset,
}

fn default_min_area() -> usize {
    DEFAULT_MIN_AREA
}

fn default_iou() -> f64 {
    DEFAULT_IOU_THRESHOLD
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub images: PathBuf,
    pub masks: PathBuf,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// Used when no annotations file supplies the categories.
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderKind,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub mlp_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub svd: bool,
    /// Defaults to the number of categories, not counting "something else".
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub theta: f64,
    #[serde(default = "default_min_area")]
    pub min_area: usize,
    #[serde(default)]
    pub connectivity: Connectivity,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    #[serde(default)]
    pub match_mode: MatchMode,
    #[serde(default)]
    pub phrase: PhraseMode,
    #[serde(default)]
    pub svd_scope: SvdScope,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default)]
    pub something_else: SomethingElsePolicy,
    #[serde(default)]
    pub planted_noise: f64,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line replacements for individual fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub encoder: Option<EncoderKind>,
    pub svd: Option<bool>,
    pub k: Option<usize>,
    pub theta: Option<f64>,
    pub min_area: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.encoder {
            self.encoder = v;
        }
        if let Some(v) = o.svd {
            self.svd = v;
        }
        if let Some(v) = o.k {
            self.k = Some(v);
        }
        if let Some(v) = o.theta {
            self.theta = v;
        }
        if let Some(v) = o.min_area {
            self.min_area = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            // Command-line paths are relative to the working directory.
            self.out = std::path::absolute(v).unwrap_or_else(|_| v.clone());
        }
    }

    /// `path` joined onto the config directory unless already absolute.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn images_dir(&self) -> PathBuf {
        self.resolve(&self.images)
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.resolve(&self.masks)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }

    pub fn annotations_path(&self) -> Option<PathBuf> {
        self.annotations.as_deref().map(|p| self.resolve(p))
    }

    pub fn vocabulary_path(&self) -> Option<PathBuf> {
        self.vocabulary.as_deref().map(|p| self.resolve(p))
    }

    /// Cache root from the config, else from the environment.
    pub fn cache_root(&self) -> Option<PathBuf> {
        self.cache_dir
            .as_deref()
            .map(|p| self.resolve(p))
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
    }

    pub fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.mlp_checkpoint.as_deref().map(|p| self.resolve(p))
    }

    /// Value checks only; no filesystem access.
    pub fn check_values(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta must lie in [0, 1], got {}", self.theta));
        }
        if self.k == Some(0) {
            return bad("k must be at least 1".into());
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return bad(format!("iou_threshold must lie in (0, 1], got {}", self.iou_threshold));
        }
        if !(self.planted_noise >= 0.0 && self.planted_noise.is_finite()) {
            return bad(format!("planted_noise must be finite and >= 0, got {}", self.planted_noise));
        }
        if self.annotations.is_none() && self.vocabulary.is_none() {
            return bad("either annotations or vocabulary must be given".into());
        }
        if self.encoder == EncoderKind::Planted && self.annotations.is_none() {
            return bad("the planted encoder needs annotations".into());
        }
        if self.encoder == EncoderKind::Mlp && self.mlp_checkpoint.is_none() {
            return bad("the mlp encoder needs mlp_checkpoint".into());
        }
        Ok(())
    }

    /// Value checks plus existence of every referenced input path.
    pub fn validate(&self) -> Result<()> {
        self.check_values()?;
        let need = |what: &str, p: PathBuf, dir: bool| {
            let ok = if dir { p.is_dir() } else { p.is_file() };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        need("image directory", self.images_dir(), true)?;
        need("mask directory", self.masks_dir(), true)?;
        if let Some(p) = self.annotations_path() {
            need("annotations file", p, false)?;
        }
        if let Some(p) = self.vocabulary_path() {
            need("vocabulary file", p, false)?;
        }
        if self.encoder == EncoderKind::ClipCache {
            match self.cache_root() {
                Some(p) => need("cache directory", p, true)?,
                None => return Err(Error::Config(format!("clip-cache needs cache_dir or {CACHE_DIR_ENV}"))),
            }
        }
        if let Some(p) = self.checkpoint_dir() {
            need("MLP checkpoint", p, true)?;
        }
        Ok(())
    }

    /// Canonical JSON with sorted keys; the output directory is excluded.
    pub fn canonical_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
        }
        v
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        RunConfig::parse(r#"{"images": "img", "masks": "m", "vocabulary": "v.json"}"#, Path::new("/data/run.json")).unwrap()
    }

    #[test]
    fn defaults_and_relative_paths() {
        let c = minimal();
        assert_eq!(c.min_area, 100);
        assert_eq!(c.connectivity, Connectivity::Eight);
        assert_eq!(c.iou_threshold, 0.5);
        assert_eq!(c.encoder, EncoderKind::Mock);
        assert!(!c.svd);
        assert_eq!(c.images_dir(), PathBuf::from("/data/img"));
        assert_eq!(c.out_dir(), PathBuf::from("/data/out"));
    }

    #[test]
    fn unknown_fields_rejected() {
        let e = RunConfig::parse(r#"{"images":"a","masks":"b","thetta":0.1}"#, Path::new("c.json")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn value_checks() {
        let mut c = minimal();
        c.theta = 1.5;
        assert!(matches!(c.check_values(), Err(Error::Config(_))));
        let mut c = minimal();
        c.k = Some(0);
        assert!(c.check_values().is_err());
        let mut c = minimal();
        c.encoder = EncoderKind::Planted;
        assert!(c.check_values().is_err());
    }

    #[test]
    fn missing_mask_dir_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("img")).unwrap();
        std::fs::write(dir.path().join("v.json"), "[]").unwrap();
        let c = RunConfig::parse(r#"{"images":"img","masks":"m","vocabulary":"v.json"}"#, &dir.path().join("c.json")).unwrap();
        match c.validate() {
            Err(Error::Config(m)) => assert!(m.contains("mask directory"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_and_hash() {
        let mut c = minimal();
        let h0 = c.hash();
        c.apply(&Overrides { out: Some(PathBuf::from("/elsewhere")), ..Default::default() });
        assert_eq!(c.hash(), h0);
        c.apply(&Overrides { theta: Some(0.05), k: Some(20), encoder: Some(EncoderKind::ClipCache), ..Default::default() });
        assert_ne!(c.hash(), h0);
        assert_eq!((c.theta, c.k, c.encoder), (0.05, Some(20), EncoderKind::ClipCache));
        assert_eq!("clip-cache".parse::<EncoderKind>().unwrap(), EncoderKind::ClipCache);
        assert!("clip".parse::<EncoderKind>().is_err());
    }
}
