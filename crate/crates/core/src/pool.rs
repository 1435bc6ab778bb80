//! Per-class segment pools: construction from a corpus, and on-disk
//! persistence.
//!
//! A pool directory holds `manifest.json`, `masks/<segment_id>.png`,
//! `features.bin` (feature-file format) and `pca.bin`. Features and the PCA
//! model are kept at `f32` precision in memory as well, so a save/load
//! cycle reproduces the pool bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::{anchors_for_image, AnchorSegment, ConsensusConfig};
use crate::error::{Error, Result};
use crate::features::{
    builtin_descriptor, crop_resize, decode_feature_file, encode_feature_file, pca_fit, DescriptorConfig,
    FeatureVector, PcaModel, DEFAULT_PCA_DIM,
};
use crate::raster::{decode_mask, EncodePng, ImageRgb};
use crate::seed::derive_seed;
use crate::segmenter::SegmenterBackend;
use crate::superpixel::{slic, SlicConfig};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const PCA_FILE: &str = "pca.bin";
pub const MASK_DIR: &str = "masks";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub anchor: AnchorSegment,
    pub feature: FeatureVector,
    /// Selection penalty, starts at 1 and grows by one per selection.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPool {
    pub class_label: String,
    pub entries: Vec<PoolEntry>,
    pub pca: PcaModel,
    pub feature_source: FeatureSource,
    /// Directory the `source_image` ids are relative to, when known.
    pub corpus_root: Option<String>,
}

impl SegmentPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pca.output_dim()
    }

    pub fn index_of(&self, segment_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.anchor.segment_id == segment_id)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn reset_weights(&mut self) {
        for e in &mut self.entries {
            e.weight = 1.0;
        }
    }

    /// Re-checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::format(format!("pool {:?}", self.class_label), msg);
        if self.entries.is_empty() {
            return Err(bad("pool has no entries".into()));
        }
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.anchor.segment_id.as_str()) {
                return Err(bad(format!("duplicate segment_id {:?}", e.anchor.segment_id)));
            }
            if !(e.weight >= 1.0) || !e.weight.is_finite() {
                return Err(bad(format!("segment {:?} has weight {} < 1", e.anchor.segment_id, e.weight)));
            }
            if e.feature.dim() != self.dim() {
                return Err(bad(format!(
                    "segment {:?} feature dim {} != pool dim {}",
                    e.anchor.segment_id,
                    e.feature.dim(),
                    self.dim()
                )));
            }
            if e.anchor.mask.is_empty() {
                return Err(bad(format!("segment {:?} has an empty mask", e.anchor.segment_id)));
            }
            if e.anchor.class_label != self.class_label {
                return Err(bad(format!(
                    "segment {:?} belongs to class {:?}",
                    e.anchor.segment_id, e.anchor.class_label
                )));
            }
        }
        Ok(())
    }
}

/// One decoded corpus image.
#[derive(Debug, Clone)]
pub struct CorpusImage {
    /// Path relative to the corpus root, e.g. `tumor/img01.png`.
    pub id: String,
    pub class_label: String,
    pub image: ImageRgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Config {
    pub slic: SlicConfig,
    pub consensus: ConsensusConfig,
    pub descriptor: DescriptorConfig,
    /// Target PCA dimension.
    pub pca_dim: usize,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            slic: SlicConfig::default(),
            consensus: ConsensusConfig::default(),
            descriptor: DescriptorConfig::default(),
            pca_dim: DEFAULT_PCA_DIM,
        }
    }
}

/// Anchors of one image: superpixels, prompts, consensus and dedup.
pub fn image_anchors(
    img: &CorpusImage,
    cfg: &Phase1Config,
    backend: &SegmenterBackend,
    seed: u64,
) -> Result<Vec<AnchorSegment>> {
    let sp = slic(&img.image, &cfg.slic, derive_seed(seed, &["slic", &img.id]))?;
    anchors_for_image(&img.image, &img.id, &img.class_label, &sp, backend, &cfg.consensus, seed)
}

/// Raw (pre-PCA) descriptor of an anchor.
pub fn raw_feature(
    img: &ImageRgb,
    anchor: &AnchorSegment,
    cfg: &Phase1Config,
    external: Option<&BTreeMap<String, FeatureVector>>,
) -> Result<FeatureVector> {
    match external {
        Some(map) => map.get(&anchor.segment_id).cloned().ok_or_else(|| {
            Error::NoCandidates(format!("no external feature for segment {:?}", anchor.segment_id))
        }),
        None => builtin_descriptor(&crop_resize(img, &anchor.mask)?, &cfg.descriptor),
    }
}

/// Builds one pool per class from the corpus.
///
/// Images that yield no anchors are skipped with a warning; a class that
/// ends up with no anchors at all is an error.
pub fn build_pool(
    corpus: &[CorpusImage],
    cfg: &Phase1Config,
    backend: &SegmenterBackend,
    seed: u64,
    external: Option<&BTreeMap<String, FeatureVector>>,
) -> Result<BTreeMap<String, SegmentPool>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut per_class: BTreeMap<&str, Vec<(AnchorSegment, FeatureVector)>> = BTreeMap::new();
    for img in corpus {
        let slot = per_class.entry(img.class_label.as_str()).or_default();
        let anchors = match image_anchors(img, cfg, backend, seed) {
            Ok(a) => a,
            Err(Error::NoAnchors(what)) => {
                log::warn!("no anchors for {what}, skipping");
                continue;
            }
            Err(e) => return Err(e),
        };
        log::info!("{}: {} anchors", img.id, anchors.len());
        for anchor in anchors {
            let f = raw_feature(&img.image, &anchor, cfg, external)?;
            slot.push((anchor, f));
        }
    }

    let source = if external.is_some() {
        FeatureSource::External
    } else {
        FeatureSource::Builtin
    };
    let mut pools = BTreeMap::new();
    for (class, items) in per_class {
        if items.is_empty() {
            return Err(Error::NoAnchors(format!("class {class:?}")));
        }
        let raw: Vec<FeatureVector> = items.iter().map(|(_, f)| f.clone()).collect();
        let pca = if raw.len() >= 2 {
            pca_fit(&raw, cfg.pca_dim)?
        } else {
            PcaModel::degenerate(raw[0].0.clone())
        }
        .to_f32_precision();
        let entries = items
            .into_iter()
            .map(|(anchor, f)| {
                Ok(PoolEntry {
                    anchor,
                    feature: pca.transform(&f)?.to_f32_precision(),
                    weight: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = SegmentPool {
            class_label: class.to_owned(),
            entries,
            pca,
            feature_source: source,
            corpus_root: None,
        };
        pool.validate()?;
        pools.insert(class.to_owned(), pool);
    }
    Ok(pools)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    class_label: String,
    feature_source: FeatureSource,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corpus_root: Option<String>,
    features_sha256: String,
    pca_sha256: String,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    segment_id: String,
    source_image: String,
    mask_file: String,
    weight: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `pool` to `dir`, replacing any previous content.
///
/// The pool is written to a sibling staging directory first and swapped in
/// with renames, so readers never see a half-written pool.
pub fn save_pool(pool: &SegmentPool, dir: &Path) -> Result<()> {
    pool.validate()?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("pool path {} has no final component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let masks = staging.join(MASK_DIR);
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;

    let records: Vec<(String, FeatureVector)> = pool
        .entries
        .iter()
        .map(|e| (e.anchor.segment_id.clone(), e.feature.clone()))
        .collect();
    let features = encode_feature_file(&records)?;
    let pca = pool.pca.encode();
    let mut entries = Vec::with_capacity(pool.entries.len());
    for e in &pool.entries {
        let mask_file = format!("{MASK_DIR}/{}.png", e.anchor.segment_id);
        write_file(&staging.join(&mask_file), &e.anchor.mask.encode_png())?;
        entries.push(ManifestEntry {
            segment_id: e.anchor.segment_id.clone(),
            source_image: e.anchor.source_image.clone(),
            mask_file,
            weight: e.weight,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        class_label: pool.class_label.clone(),
        feature_source: pool.feature_source,
        dim: pool.dim(),
        corpus_root: pool.corpus_root.clone(),
        features_sha256: sha256_hex(&features),
        pca_sha256: sha256_hex(&pca),
        entries,
    };
    write_file(&staging.join(FEATURES_FILE), &features)?;
    write_file(&staging.join(PCA_FILE), &pca)?;
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_file(&staging.join(MANIFEST_FILE), &json)?;

    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Reads and validates a pool directory.
pub fn load_pool(dir: &Path) -> Result<SegmentPool> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
    let bad = |msg: String| Error::format(manifest_path.display().to_string(), msg);
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported manifest version {}", manifest.version)));
    }

    let features_bytes = read_file(&dir.join(FEATURES_FILE))?;
    if sha256_hex(&features_bytes) != manifest.features_sha256 {
        return Err(bad(format!("{FEATURES_FILE} checksum mismatch")));
    }
    let pca_bytes = read_file(&dir.join(PCA_FILE))?;
    if sha256_hex(&pca_bytes) != manifest.pca_sha256 {
        return Err(bad(format!("{PCA_FILE} checksum mismatch")));
    }
    let features = decode_feature_file(&features_bytes)?;
    let pca = PcaModel::decode(&pca_bytes)?;
    if pca.output_dim() != manifest.dim {
        return Err(bad(format!("PCA output dim {} != manifest dim {}", pca.output_dim(), manifest.dim)));
    }
    if features.len() != manifest.entries.len() {
        return Err(bad(format!(
            "{} feature records for {} entries",
            features.len(),
            manifest.entries.len()
        )));
    }

    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (rec, (fid, feature)) in manifest.entries.into_iter().zip(features) {
        if !seen.insert(rec.segment_id.clone()) {
            return Err(bad(format!("duplicate segment_id {:?}", rec.segment_id)));
        }
        if fid != rec.segment_id {
            return Err(bad(format!("feature record {fid:?} does not match entry {:?}", rec.segment_id)));
        }
        let mask_path = safe_join(dir, &rec.mask_file).ok_or_else(|| bad(format!("mask path {:?} escapes the pool", rec.mask_file)))?;
        let mask = decode_mask(&read_file(&mask_path)?)?;
        entries.push(PoolEntry {
            anchor: AnchorSegment {
                mask,
                source_image: rec.source_image,
                class_label: manifest.class_label.clone(),
                segment_id: rec.segment_id,
            },
            feature,
            weight: rec.weight,
        });
    }
    let pool = SegmentPool {
        class_label: manifest.class_label,
        entries,
        pca,
        feature_source: manifest.feature_source,
        corpus_root: manifest.corpus_root,
    };
    pool.validate()?;
    Ok(pool)
}

fn safe_join(dir: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel);
    rel.components()
        .all(|c| matches!(c, std::path::Component::Normal(_)))
        .then(|| dir.join(rel))
}

/// Saves each pool under `root/<class_label>`.
pub fn save_pools(pools: &BTreeMap<String, SegmentPool>, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (class, pool) in pools {
        save_pool(pool, &root.join(class))?;
    }
    Ok(())
}

/// Loads every pool directory (one containing a manifest) under `root`.
pub fn load_pools(root: &Path) -> Result<BTreeMap<String, SegmentPool>> {
    let mut pools = BTreeMap::new();
    let listing = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    for dir in dirs {
        let pool = load_pool(&dir)?;
        if pools.contains_key(&pool.class_label) {
            return Err(Error::format(
                root.display().to_string(),
                format!("two pools for class {:?}", pool.class_label),
            ));
        }
        pools.insert(pool.class_label.clone(), pool);
    }
    if pools.is_empty() {
        return Err(Error::format(root.display().to_string(), "no pools found"));
    }
    Ok(pools)
}
