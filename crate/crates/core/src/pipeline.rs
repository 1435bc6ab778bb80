//! End-to-end orchestration: indexing a corpus into pools, synthesizing
//! augmented images, and writing a dataset.
//!
//! Corpus layout is `<root>/<class_label>/*.{png,jpg,jpeg}`. Image ids are
//! paths relative to the root with `/` separators.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blend::{inpaint_layers, make_blend_plan, paste, BlendConfig, BlendLayers, BlendPlan, Inpainter};
use crate::error::{Error, Result};
use crate::features::{ingest_external_features, FeatureVector};
use crate::pool::{build_pool, image_anchors, raw_feature, save_pools, CorpusImage, FeatureSource, Phase1Config, SegmentPool};
use crate::raster::{decode_image, BitMask, EncodePng, ImageRgb};
use crate::sampler::{penalize, replacement_distribution, sample_replacement, TargetSelection};
use crate::seed::{derive_rng, derive_seed};
use crate::segmenter::SegmenterBackend;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const UNION_MASK_DIR: &str = "masks";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InpaintBackendKind {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub max_attempts: usize,
    pub per_class_count: usize,
    pub inpaint_backend: InpaintBackendKind,
    pub master_seed: u64,
    /// Reset pool weights before every image instead of letting them
    /// accumulate over the run.
    pub reset_weights_per_image: bool,
    /// Fraction of failed images above which generation fails.
    pub max_failure_frac: f64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            ratio_min: 0.30,
            ratio_max: 1.00,
            max_attempts: 10,
            per_class_count: 600,
            inpaint_backend: InpaintBackendKind::Builtin,
            master_seed: 0,
            reset_weights_per_image: false,
            max_failure_frac: 0.10,
        }
    }
}

impl Phase2Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < ratio_min <= ratio_max <= 1, got [{}, {}]",
                self.ratio_min, self.ratio_max
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("max_attempts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_frac) {
            return Err(Error::invalid("max_failure_frac must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    /// Output path relative to the output directory.
    pub output: String,
    /// Union of every modified pixel, relative to the output directory.
    pub union_mask: String,
    pub source_image: String,
    pub class_label: String,
    pub replaced: Vec<String>,
    pub replacements: Vec<String>,
    pub ratio: f64,
    pub seed: u64,
    pub attempts: usize,
}

/// One image found by [`scan_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFile {
    pub id: String,
    pub class_label: String,
    pub path: PathBuf,
}

fn is_image_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    out.sort();
    Ok(out)
}

/// Lists corpus images in class then file-name order.
pub fn scan_corpus(root: &Path) -> Result<Vec<CorpusFile>> {
    let mut files = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let class = class_dir.file_name().expect("entry has a name").to_string_lossy().into_owned();
        for path in sorted_entries(&class_dir)?.into_iter().filter(|p| is_image_file(p)) {
            let name = path.file_name().expect("entry has a name").to_string_lossy().into_owned();
            files.push(CorpusFile { id: format!("{class}/{name}"), class_label: class.clone(), path });
        }
    }
    if files.is_empty() {
        return Err(Error::invalid(format!("no images under {}", root.display())));
    }
    Ok(files)
}

/// Decodes every corpus image; unreadable files are skipped with a warning.
pub fn load_corpus(root: &Path) -> Result<Vec<CorpusImage>> {
    let mut images = Vec::new();
    for f in scan_corpus(root)? {
        let decoded = fs::read(&f.path).map_err(|e| Error::io(&f.path, e)).and_then(|b| decode_image(&b));
        match decoded {
            Ok(image) => images.push(CorpusImage { id: f.id, class_label: f.class_label, image }),
            Err(e) => log::warn!("skipping {}: {e}", f.path.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::invalid(format!("no readable images under {}", root.display())));
    }
    Ok(images)
}

/// Builds pools for the corpus at `corpus_dir` and writes them under
/// `out_dir/<class>`.
pub fn phase1_index(
    corpus_dir: &Path,
    out_dir: &Path,
    cfg: &Phase1Config,
    backend: &SegmenterBackend,
    seed: u64,
    external_features: Option<&Path>,
) -> Result<BTreeMap<String, SegmentPool>> {
    let corpus = load_corpus(corpus_dir)?;
    let external = external_features.map(ingest_external_features).transpose()?;
    let mut pools = build_pool(&corpus, cfg, backend, seed, external.as_ref())?;
    let root = fs::canonicalize(corpus_dir).map_err(|e| Error::io(corpus_dir, e))?;
    for pool in pools.values_mut() {
        pool.corpus_root = Some(root.to_string_lossy().into_owned());
    }
    save_pools(&pools, out_dir)?;
    Ok(pools)
}

/// Lazily loaded corpus images keyed by id.
#[derive(Debug, Default)]
pub struct ImageStore {
    root: Option<PathBuf>,
    cache: HashMap<String, ImageRgb>,
}

impl ImageStore {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root, cache: HashMap::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, img: ImageRgb) {
        self.cache.insert(id.into(), img);
    }

    pub fn get(&mut self, id: &str) -> Result<&ImageRgb> {
        if !self.cache.contains_key(id) {
            let root = self
                .root
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("image {id:?} not loaded and no corpus root set")))?;
            let path = root.join(id);
            let img = decode_image(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
            self.cache.insert(id.to_owned(), img);
        }
        Ok(&self.cache[id])
    }
}

/// Fraction of the image covered by the union of every plan's replacement
/// and inpaint masks.
pub fn new_area_ratio(plans: &[BlendPlan], width: usize, height: usize) -> Result<f64> {
    Ok(plans_union(plans, width, height)?.count() as f64 / (width * height) as f64)
}

pub fn plans_union(plans: &[BlendPlan], width: usize, height: usize) -> Result<BitMask> {
    let mut u = BitMask::new(width, height)?;
    for p in plans {
        u = u.union(&p.warped_replacement_mask)?.union(&p.inpaint_mask)?;
    }
    Ok(u)
}

/// Target segments of an indexed image: the pool entries it contributed.
pub fn indexed_targets(pool: &SegmentPool, image_id: &str) -> Vec<TargetSelection> {
    pool.entries
        .iter()
        .filter(|e| e.anchor.source_image == image_id)
        .map(|e| TargetSelection { segment: e.anchor.clone(), feature: e.feature.clone() })
        .collect()
}

/// Target segments of an image the pool has not seen, projected with the
/// pool's PCA. Needs builtin features.
pub fn fresh_targets(
    img: &CorpusImage,
    pool: &SegmentPool,
    cfg: &Phase1Config,
    backend: &SegmenterBackend,
    seed: u64,
) -> Result<Vec<TargetSelection>> {
    if pool.feature_source != FeatureSource::Builtin {
        return Err(Error::invalid(format!(
            "pool {:?} uses external features; {} cannot be described in-process",
            pool.class_label, img.id
        )));
    }
    image_anchors(img, cfg, backend, seed)?
        .into_iter()
        .map(|segment| {
            let raw = raw_feature(&img.image, &segment, cfg, None::<&BTreeMap<String, FeatureVector>>)?;
            let feature = pool.pca.transform(&raw)?.to_f32_precision();
            Ok(TargetSelection { segment, feature })
        })
        .collect()
}

/// Output of one augmentation.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: ImageRgb,
    /// Pasted but not yet repaired.
    pub composite: ImageRgb,
    pub plans: Vec<BlendPlan>,
    pub union: BitMask,
    pub replaced: Vec<String>,
    pub replacements: Vec<String>,
    pub ratio: f64,
    pub attempts: usize,
}

/// Replaces target segments of `image` until the new-area ratio reaches
/// `ratio_min`, then repairs all seams in one inpainting pass.
///
/// Every selection penalizes the chosen pool entry. A failed attempt rolls
/// the weights back before the next draw.
#[allow(clippy::too_many_arguments)]
pub fn phase2_augment(
    image: &ImageRgb,
    targets: &[TargetSelection],
    pool: &mut SegmentPool,
    store: &mut ImageStore,
    cfg: &Phase2Config,
    blend: &BlendConfig,
    inpainter: &Inpainter,
    seed: u64,
) -> Result<Augmented> {
    cfg.validate()?;
    blend.validate()?;
    if targets.is_empty() {
        return Err(Error::NoAnchors("target image has no segments".into()));
    }
    let (w, h) = image.dims();
    let mut best = 0.0f64;
    for attempt in 0..cfg.max_attempts {
        let saved = pool.weights();
        let mut rng = derive_rng(seed, &["attempt", &attempt.to_string()]);
        let mut remaining: Vec<usize> = (0..targets.len()).collect();
        let mut composite = image.clone();
        let (mut plans, mut replaced, mut replacements) = (Vec::new(), Vec::new(), Vec::new());
        let mut ratio = 0.0;
        while ratio < cfg.ratio_min && !remaining.is_empty() {
            let t = &targets[remaining.swap_remove(rng.random_range(0..remaining.len()))];
            let dist = replacement_distribution(t, pool, &BTreeSet::new())?;
            let j = sample_replacement(&dist, &mut rng);
            let repl = pool.entries[j].anchor.clone();
            let plan = match make_blend_plan(image, &t.segment, store.get(&repl.source_image)?, &repl, blend) {
                Ok(p) => p,
                Err(e @ (Error::EmptyMask(_) | Error::NotInvertible(_))) => {
                    log::debug!("{} -> {}: {e}", t.segment.segment_id, repl.segment_id);
                    continue;
                }
                Err(e) => return Err(e),
            };
            penalize(pool, j)?;
            composite = paste(&composite, &plan)?;
            plans.push(plan);
            replaced.push(t.segment.segment_id.clone());
            replacements.push(repl.segment_id);
            ratio = new_area_ratio(&plans, w, h)?;
        }
        best = best.max(ratio);
        if ratio >= cfg.ratio_min && ratio <= cfg.ratio_max {
            let layers = BlendLayers::from_plans(w, h, &plans)?;
            let out = inpaint_layers(&composite, &layers, inpainter, blend)?;
            return Ok(Augmented {
                image: out,
                composite,
                union: plans_union(&plans, w, h)?,
                plans,
                replaced,
                replacements,
                ratio,
                attempts: attempt + 1,
            });
        }
        log::debug!("attempt {attempt}: ratio {ratio:.3} outside [{}, {}]", cfg.ratio_min, cfg.ratio_max);
        for (e, w0) in pool.entries.iter_mut().zip(saved) {
            e.weight = w0;
        }
    }
    Err(Error::RatioUnreachable { best, min: cfg.ratio_min, max: cfg.ratio_max, attempts: cfg.max_attempts })
}

/// Seed of output `seq` of `class`.
pub fn image_seed(master: u64, class: &str, seq: usize) -> u64 {
    derive_seed(master, &["image", class, &seq.to_string()])
}

#[derive(Debug, Clone, Default)]
pub struct GenerateReport {
    pub records: Vec<SynthesisRecord>,
    /// `(class, seq, error)` for every skipped output.
    pub failures: Vec<(String, usize, String)>,
}

/// Writes `per_class_count` augmented images per class under `out_dir`.
///
/// Output `seq` of a class augments the class's `seq mod n`-th image with
/// seed [`image_seed`]. Images go to `<class>/<seq>_<stem>.png`, their
/// modified-pixel masks to `masks/<class>/<seq>_<stem>.png`, and one JSON
/// record per image to `records.jsonl`. Failed images are skipped; more than
/// `max_failure_frac` failures is an error.
pub fn generate_dataset(
    corpus: &[CorpusImage],
    pools: &mut BTreeMap<String, SegmentPool>,
    store: &mut ImageStore,
    cfg: &Phase2Config,
    blend: &BlendConfig,
    inpainter: &Inpainter,
    out_dir: &Path,
) -> Result<GenerateReport> {
    cfg.validate()?;
    let mut by_class: BTreeMap<&str, Vec<&CorpusImage>> = BTreeMap::new();
    for img in corpus {
        by_class.entry(img.class_label.as_str()).or_default().push(img);
    }
    for class in by_class.keys() {
        if !pools.contains_key(*class) {
            return Err(Error::invalid(format!("no pool for class {class:?}")));
        }
    }
    for img in corpus {
        store.insert(img.id.clone(), img.image.clone());
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records_path = out_dir.join(RECORDS_FILE);
    let mut records_file = fs::File::create(&records_path).map_err(|e| Error::io(&records_path, e))?;

    let mut report = GenerateReport::default();
    let mut requested = 0usize;
    for (class, images) in &by_class {
        let pool = pools.get_mut(*class).expect("checked above");
        let class_dir = out_dir.join(class);
        let mask_dir = out_dir.join(UNION_MASK_DIR).join(class);
        for d in [&class_dir, &mask_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for seq in 0..cfg.per_class_count {
            requested += 1;
            let src = images[seq % images.len()];
            let seed = image_seed(cfg.master_seed, class, seq);
            if cfg.reset_weights_per_image {
                pool.reset_weights();
            }
            let targets = indexed_targets(pool, &src.id);
            let result = if targets.is_empty() {
                Err(Error::NoAnchors(format!("{} is not indexed in pool {class:?}", src.id)))
            } else {
                phase2_augment(&src.image, &targets, pool, store, cfg, blend, inpainter, seed)
            };
            let aug = match result {
                Ok(a) => a,
                Err(e) => {
                    log::warn!("{class} #{seq} ({}): {e}", src.id);
                    report.failures.push((class.to_string(), seq, e.to_string()));
                    continue;
                }
            };
            let stem = Path::new(&src.id).file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy());
            let name = format!("{seq:04}_{stem}.png");
            let out_rel = format!("{class}/{name}");
            let mask_rel = format!("{UNION_MASK_DIR}/{class}/{name}");
            for (rel, bytes) in [(&out_rel, aug.image.encode_png()), (&mask_rel, aug.union.encode_png())] {
                let p = out_dir.join(rel);
                fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
            let record = SynthesisRecord {
                output: out_rel,
                union_mask: mask_rel,
                source_image: src.id.clone(),
                class_label: class.to_string(),
                replaced: aug.replaced,
                replacements: aug.replacements,
                ratio: aug.ratio,
                seed,
                attempts: aug.attempts,
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(records_file, "{line}").map_err(|e| Error::io(&records_path, e))?;
            report.records.push(record);
        }
    }
    let failed = report.failures.len();
    if failed > 0 && failed as f64 > cfg.max_failure_frac * requested as f64 {
        return Err(Error::invalid(format!("{failed} of {requested} images failed")));
    }
    Ok(report)
}

/// Source, composite and repaired result side by side.
pub fn triptych(source: &ImageRgb, aug: &Augmented) -> Result<ImageRgb> {
    ImageRgb::hconcat(&[source, &aug.composite, &aug.image])
}
