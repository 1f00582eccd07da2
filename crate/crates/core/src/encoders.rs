//! Encoder abstraction and backends.
//!
//! Real CLIP / EfficientNet outputs never run in-process; they arrive as OVT
//! tensors listed in a cache manifest. The mock backends derive everything
//! from a seeded digest of their input so the test suite stays hermetic.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ovt::Tensor;

/// Joint embedding dimension of the CLIP ViT-B/32 space.
pub const EMBED_DIM: usize = 512;

/// EfficientNet-B0 head feature map shape (H, W, K).
pub const FEATURE_SHAPE: [usize; 3] = [7, 7, 1280];

/// Unit-norm embedding, stored at interchange (f32) precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `values` in f64; fails when the norm is below `min_norm`.
    pub fn normalized(values: &[f64], min_norm: f64) -> Option<Self> {
        let norm = l2_norm(values);
        if !(norm >= min_norm) || !norm.is_finite() {
            return None;
        }
        Some(Embedding(values.iter().map(|v| (v / norm) as f32).collect()))
    }

    /// Wraps stored values verbatim (cache hits, checkpoints).
    pub fn from_raw(values: Vec<f32>) -> Self {
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.to_f64())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dense H x W x K CNN feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: [usize; 3],
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(shape: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::invalid(format!(
                "feature shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap { shape, values })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Flattened view in (H, W, K) order.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn flat_len(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(self.shape.to_vec(), self.values.clone()).expect("shape checked at construction")
    }
}

/// Cache key of a localized region: `"{image_id}:{region_id}"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionKey {
    pub image_id: u64,
    pub region_id: usize,
}

impl fmt::Display for RegionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.image_id, self.region_id)
    }
}

/// A source of text embeddings, image embeddings and CNN feature maps.
pub trait Encoder: Send + Sync {
    fn encode_text(&self, prompt: &str) -> Result<Embedding>;

    fn encode_image(&self, key: RegionKey, patch: &RgbImage) -> Result<Embedding>;

    fn extract_features(&self, key: RegionKey, patch: &RgbImage) -> Result<FeatureMap>;

    /// Human-readable description of the preprocessing behind the vectors.
    fn preprocessing(&self) -> Option<String> {
        None
    }
}

fn check_prompt(prompt: &str) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must be non-empty"));
    }
    Ok(())
}

fn check_patch(patch: &RgbImage) -> Result<()> {
    if patch.width() == 0 || patch.height() == 0 {
        return Err(Error::invalid("patch must be non-empty"));
    }
    Ok(())
}

fn patch_bytes(patch: &RgbImage) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + patch.as_raw().len());
    bytes.extend_from_slice(&patch.width().to_le_bytes());
    bytes.extend_from_slice(&patch.height().to_le_bytes());
    bytes.extend_from_slice(patch.as_raw());
    bytes
}

fn digest_rng(domain: &str, seed: u64, payload: &[u8]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"ovor-mock\0");
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(payload);
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(e) = Embedding::normalized(&v, 1e-12) {
            return e;
        }
    }
}

/// Deterministic pseudo-encoder: every output is a function of (seed, input digest).
#[derive(Debug, Clone)]
pub struct MockEncoder {
    seed: u64,
    dim: usize,
    feature_shape: [usize; 3],
}

impl MockEncoder {
    pub fn new(seed: u64) -> Self {
        MockEncoder { seed, dim: EMBED_DIM, feature_shape: FEATURE_SHAPE }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn with_feature_shape(mut self, shape: [usize; 3]) -> Self {
        self.feature_shape = shape;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Encoder for MockEncoder {
    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        check_prompt(prompt)?;
        Ok(gaussian_unit(&mut digest_rng("text", self.seed, prompt.as_bytes()), self.dim))
    }

    fn encode_image(&self, _key: RegionKey, patch: &RgbImage) -> Result<Embedding> {
        check_patch(patch)?;
        Ok(gaussian_unit(&mut digest_rng("image", self.seed, &patch_bytes(patch)), self.dim))
    }

    fn extract_features(&self, _key: RegionKey, patch: &RgbImage) -> Result<FeatureMap> {
        check_patch(patch)?;
        let mut rng = digest_rng("features", self.seed, &patch_bytes(patch));
        let n = self.feature_shape.iter().product();
        // Non-negative, like a post-activation CNN head.
        let values = (0..n).map(|_| rng.random::<f32>()).collect();
        FeatureMap::new(self.feature_shape, values)
    }

    fn preprocessing(&self) -> Option<String> {
        Some(format!("mock(seed={})", self.seed))
    }
}

/// Mock whose image embeddings are noisy copies of planted category embeddings.
///
/// `encode_image(key)` returns `normalize(table[assignment[key]] + noise * g)`
/// with `g` a standard Gaussian vector seeded by the region key.
pub struct PlantedMock {
    inner: MockEncoder,
    categories: Vec<Embedding>,
    assignment: BTreeMap<RegionKey, usize>,
    noise: f64,
}

impl PlantedMock {
    pub fn new(
        inner: MockEncoder,
        categories: Vec<Embedding>,
        assignment: BTreeMap<RegionKey, usize>,
        noise: f64,
    ) -> Result<Self> {
        if !(noise >= 0.0) {
            return Err(Error::invalid(format!("noise must be >= 0, got {noise}")));
        }
        if let Some((key, &cat)) = assignment.iter().find(|(_, &c)| c >= categories.len()) {
            return Err(Error::invalid(format!(
                "region {key} planted on category {cat}, table has {}",
                categories.len()
            )));
        }
        Ok(PlantedMock { inner, categories, assignment, noise })
    }
}

impl Encoder for PlantedMock {
    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        self.inner.encode_text(prompt)
    }

    fn encode_image(&self, key: RegionKey, _patch: &RgbImage) -> Result<Embedding> {
        let cat = *self.assignment.get(&key).ok_or_else(|| Error::MissingKey { key: key.to_string() })?;
        let base = &self.categories[cat];
        if self.noise == 0.0 {
            return Ok(base.clone());
        }
        let mut rng = digest_rng("planted", self.inner.seed, key.to_string().as_bytes());
        let v: Vec<f64> = base
            .values()
            .iter()
            .map(|&x| x as f64 + self.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Embedding::normalized(&v, 1e-12)
            .ok_or_else(|| Error::DegenerateEmbedding(format!("planted embedding for region {key}")))
    }

    fn extract_features(&self, key: RegionKey, patch: &RgbImage) -> Result<FeatureMap> {
        self.inner.extract_features(key, patch)
    }

    fn preprocessing(&self) -> Option<String> {
        Some(format!("planted-mock(seed={}, noise={})", self.inner.seed, self.noise))
    }
}

/// One entry of a cache manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub path: PathBuf,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// Manifest written by the export tool: key -> OVT file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<String>,
    #[serde(default)]
    pub models: BTreeMap<String, String>,
    pub entries: BTreeMap<String, CacheEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

fn default_format_version() -> u32 {
    1
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Read-only, memoizing view over one cache manifest.
#[derive(Debug)]
pub struct FileCache {
    root: PathBuf,
    manifest: CacheManifest,
    loaded: RwLock<HashMap<String, Arc<Tensor>>>,
}

impl FileCache {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CacheManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if manifest.format_version != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported manifest version {}", manifest.format_version),
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(FileCache { root, manifest, loaded: RwLock::new(HashMap::new()) })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn contains(&self, key: &str) -> bool {
        self.manifest.entries.contains_key(key)
    }

    /// Loads (once) and verifies the tensor stored under `key`.
    pub fn get(&self, key: &str) -> Result<Arc<Tensor>> {
        if let Some(t) = self.loaded.read().expect("cache lock poisoned").get(key) {
            return Ok(Arc::clone(t));
        }
        let entry = self.manifest.entries.get(key).ok_or_else(|| Error::MissingKey { key: key.to_string() })?;
        let path = self.root.join(&entry.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let corrupt = |reason: String| Error::CorruptCache { key: key.to_string(), reason };
        if let Some(expected) = &entry.sha256 {
            let found = sha256_hex(&bytes);
            if !found.eq_ignore_ascii_case(expected) {
                return Err(corrupt(format!("checksum {found} != manifest {expected}")));
            }
        }
        let tensor = Tensor::read_from(&bytes[..], &path)?;
        if tensor.dims != entry.shape {
            return Err(corrupt(format!("shape {:?} != manifest {:?}", tensor.dims, entry.shape)));
        }
        let tensor = Arc::new(tensor);
        let mut map = self.loaded.write().expect("cache lock poisoned");
        Ok(Arc::clone(map.entry(key.to_string()).or_insert(tensor)))
    }

    fn embedding(&self, key: &str) -> Result<Embedding> {
        let tensor = self.get(key)?;
        let corrupt = |reason: String| Error::CorruptCache { key: key.to_string(), reason };
        if tensor.dims.len() != 1 {
            return Err(corrupt(format!("embedding must be 1-D, got {:?}", tensor.dims)));
        }
        let values = tensor.as_f32().ok_or_else(|| corrupt("embedding payload must be f32".into()))?;
        let e = Embedding::from_raw(values.to_vec());
        if (e.norm() - 1.0).abs() > 1e-5 {
            return Err(corrupt(format!("embedding norm {} is not 1", e.norm())));
        }
        Ok(e)
    }
}

/// File names of the three manifests inside a cache root.
pub const TEXT_MANIFEST: &str = "text.json";
pub const IMAGE_MANIFEST: &str = "image.json";
pub const FEATURES_MANIFEST: &str = "features.json";

/// Backend reading exported tensors: prompts, region embeddings, region feature maps.
#[derive(Debug)]
pub struct CacheEncoder {
    root: PathBuf,
    text: Option<FileCache>,
    image: Option<FileCache>,
    features: Option<FileCache>,
    feature_shape: [usize; 3],
}

impl CacheEncoder {
    /// Opens whichever of `text.json`, `image.json`, `features.json` exist under `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::BackendUnavailable(format!("cache directory {} does not exist", root.display())));
        }
        let open = |name: &str| -> Result<Option<FileCache>> {
            let p = root.join(name);
            if p.exists() {
                FileCache::open(p).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(CacheEncoder {
            text: open(TEXT_MANIFEST)?,
            image: open(IMAGE_MANIFEST)?,
            features: open(FEATURES_MANIFEST)?,
            root,
            feature_shape: FEATURE_SHAPE,
        })
    }

    pub fn with_feature_shape(mut self, shape: [usize; 3]) -> Self {
        self.feature_shape = shape;
        self
    }

    fn manifest<'a>(&self, cache: &'a Option<FileCache>, name: &str) -> Result<&'a FileCache> {
        cache.as_ref().ok_or_else(|| {
            Error::BackendUnavailable(format!("no {name} under {}", self.root.display()))
        })
    }
}

impl Encoder for CacheEncoder {
    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        check_prompt(prompt)?;
        self.manifest(&self.text, TEXT_MANIFEST)?.embedding(prompt)
    }

    fn encode_image(&self, key: RegionKey, _patch: &RgbImage) -> Result<Embedding> {
        self.manifest(&self.image, IMAGE_MANIFEST)?.embedding(&key.to_string())
    }

    fn extract_features(&self, key: RegionKey, _patch: &RgbImage) -> Result<FeatureMap> {
        let key = key.to_string();
        let tensor = self.manifest(&self.features, FEATURES_MANIFEST)?.get(&key)?;
        if tensor.dims != self.feature_shape {
            return Err(Error::CorruptCache {
                key,
                reason: format!("expected shape {:?}, found {:?}", self.feature_shape, tensor.dims),
            });
        }
        let values = tensor.as_f32().ok_or_else(|| Error::CorruptCache {
            key: key.clone(),
            reason: "feature payload must be f32".into(),
        })?;
        FeatureMap::new(self.feature_shape, values.to_vec())
    }

    fn preprocessing(&self) -> Option<String> {
        [&self.image, &self.text, &self.features]
            .into_iter()
            .flatten()
            .find_map(|c| c.manifest.preprocessing.clone())
    }
}

/// Writes `tensor` under `dir/file` and registers it in `manifest` with its checksum.
pub fn export_entry(dir: &Path, manifest: &mut CacheManifest, key: &str, file: &str, tensor: &Tensor) -> Result<()> {
    let mut bytes = Vec::new();
    tensor.write_to(&mut bytes).map_err(|e| Error::io(dir.join(file), e))?;
    let path = dir.join(file);
    std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    manifest.entries.insert(
        key.to_string(),
        CacheEntry { path: PathBuf::from(file), shape: tensor.dims.clone(), sha256: Some(sha256_hex(&bytes)) },
    );
    Ok(())
}

pub fn write_manifest(path: &Path, manifest: &CacheManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn patch(seed: u8, w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([seed, x as u8, y as u8]))
    }

    const KEY: RegionKey = RegionKey { image_id: 1, region_id: 0 };

    #[test]
    fn mock_text_is_deterministic_and_unit_norm() {
        let enc = MockEncoder::new(0);
        let a = enc.encode_text("a photo of cat").unwrap();
        let b = enc.encode_text("a photo of cat").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), EMBED_DIM);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_ne!(a, MockEncoder::new(1).encode_text("a photo of cat").unwrap());
        assert!(matches!(enc.encode_text(""), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mock_image_embeddings_distinct_across_patches() {
        let enc = MockEncoder::new(7);
        let mut seen = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w = rng.random_range(1..6);
            let h = rng.random_range(1..6);
            let p = RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
            let e = enc.encode_image(KEY, &p).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-6);
            let bits: Vec<u32> = e.values().iter().map(|v| v.to_bits()).collect();
            seen.insert((patch_bytes(&p), bits));
        }
        let digests: HashSet<_> = seen.iter().map(|(p, _)| p.clone()).collect();
        let embeddings: HashSet<_> = seen.iter().map(|(_, e)| e.clone()).collect();
        assert_eq!(digests.len(), embeddings.len());
    }

    #[test]
    fn mock_features_shape_and_determinism() {
        let enc = MockEncoder::new(1);
        let p = patch(9, 3, 2);
        let a = enc.extract_features(KEY, &p).unwrap();
        assert_eq!(a.shape(), FEATURE_SHAPE);
        assert_eq!(a, enc.extract_features(KEY, &p).unwrap());
        assert!(enc.extract_features(KEY, &RgbImage::new(0, 0)).is_err());
    }

    #[test]
    fn planted_zero_noise_returns_category_embedding() {
        let inner = MockEncoder::new(0);
        let table: Vec<_> = ["x", "y"].iter().map(|t| inner.encode_text(t).unwrap()).collect();
        let assignment = BTreeMap::from([(KEY, 1usize)]);
        let planted = PlantedMock::new(inner, table.clone(), assignment, 0.0).unwrap();
        assert_eq!(planted.encode_image(KEY, &patch(0, 1, 1)).unwrap(), table[1]);
        let other = RegionKey { image_id: 2, region_id: 0 };
        assert!(matches!(planted.encode_image(other, &patch(0, 1, 1)), Err(Error::MissingKey { .. })));
    }

    #[test]
    fn planted_rejects_negative_noise_and_bad_category() {
        let table = vec![MockEncoder::new(0).encode_text("x").unwrap()];
        assert!(PlantedMock::new(MockEncoder::new(0), table.clone(), BTreeMap::new(), -0.1).is_err());
        let bad = BTreeMap::from([(KEY, 3usize)]);
        assert!(PlantedMock::new(MockEncoder::new(0), table, bad, 0.0).is_err());
    }

    fn write_cache(dir: &Path) -> Embedding {
        let e = MockEncoder::new(5).encode_text("a photo of cat").unwrap();
        let mut text = CacheManifest { format_version: 1, ..Default::default() };
        let t = Tensor::f32(vec![e.dim()], e.values().to_vec()).unwrap();
        export_entry(dir, &mut text, "a photo of cat", "t0.ovt", &t).unwrap();
        write_manifest(&dir.join(TEXT_MANIFEST), &text).unwrap();

        let mut feats = CacheManifest { format_version: 1, ..Default::default() };
        let good = Tensor::f32(vec![7, 7, 1280], vec![0.5; 7 * 7 * 1280]).unwrap();
        export_entry(dir, &mut feats, "1:0", "f0.ovt", &good).unwrap();
        let bad = Tensor::f32(vec![7, 7, 10], vec![0.5; 490]).unwrap();
        export_entry(dir, &mut feats, "1:1", "f1.ovt", &bad).unwrap();
        write_manifest(&dir.join(FEATURES_MANIFEST), &feats).unwrap();
        e
    }

    #[test]
    fn cache_returns_exact_vectors_and_reports_errors() {
        let dir = tempfile::tempdir().unwrap();
        let expected = write_cache(dir.path());
        let cache = CacheEncoder::open(dir.path()).unwrap();

        let got = cache.encode_text("a photo of cat").unwrap();
        assert_eq!(got, expected);
        // Memoized path returns the same bits.
        assert_eq!(cache.encode_text("a photo of cat").unwrap(), expected);

        match cache.encode_text("a photo of dog") {
            Err(Error::MissingKey { key }) => assert_eq!(key, "a photo of dog"),
            other => panic!("expected missing key, got {other:?}"),
        }
        assert!(matches!(cache.encode_image(KEY, &patch(0, 1, 1)), Err(Error::BackendUnavailable(_))));

        let f = cache.extract_features(KEY, &patch(0, 1, 1)).unwrap();
        assert_eq!(f.shape(), [7, 7, 1280]);
        assert!(f.values().iter().all(|&v| v == 0.5));
        let bad = RegionKey { image_id: 1, region_id: 1 };
        match cache.extract_features(bad, &patch(0, 1, 1)) {
            Err(Error::CorruptCache { reason, .. }) => assert!(reason.contains("[7, 7, 1280]"), "{reason}"),
            other => panic!("expected corrupt cache, got {other:?}"),
        }
    }

    #[test]
    fn cache_detects_tampered_file() {
        let dir = tempfile::tempdir().unwrap();
        write_cache(dir.path());
        let path = dir.path().join("t0.ovt");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        let cache = CacheEncoder::open(dir.path()).unwrap();
        assert!(matches!(cache.encode_text("a photo of cat"), Err(Error::CorruptCache { .. })));
    }

    #[test]
    fn cache_concurrent_reads_agree() {
        let dir = tempfile::tempdir().unwrap();
        let expected = write_cache(dir.path());
        let cache = Arc::new(CacheEncoder::open(dir.path()).unwrap());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let c = Arc::clone(&cache);
                std::thread::spawn(move || c.encode_text("a photo of cat").unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), expected);
        }
    }

    #[test]
    fn missing_cache_root_is_unavailable() {
        assert!(matches!(CacheEncoder::open("/nonexistent/ovor"), Err(Error::BackendUnavailable(_))));
    }
}
