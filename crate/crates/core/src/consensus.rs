//! Anchor segments from repeated point prompts.
//!
//! Each superpixel is prompted `k` times at random points. The resulting
//! masks are grouped by their identity vectors (centroid and square-rooted
//! area), the largest group wins, and its most frequent mask (up to IoU
//! equivalence) becomes the superpixel's anchor. Anchors that duplicate each
//! other across superpixels are then removed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{mask_iou, BitMask, ImageRgb};
use crate::seed::derive_rng;
use crate::segmenter::{segment_at_point, SegmenterBackend};
use crate::superpixel::{sample_point_in_pixels, SuperpixelMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityVector {
    pub cx: f64,
    pub cy: f64,
    pub scnt: f64,
}

impl IdentityVector {
    pub fn distance(&self, other: &IdentityVector) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2) + (self.scnt - other.scnt).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    /// Prompts per superpixel.
    pub k: usize,
    /// Single-linkage cutoff as a fraction of `sqrt(W*H)`.
    pub cluster_tol_frac: f64,
    /// IoU at which two masks count as the same mask.
    pub freq_iou: f64,
    /// IoU at which two anchors count as duplicates.
    pub dedup_iou: f64,
    /// Drop anchors smaller than `min_area_frac` of the image.
    pub min_area_filter: bool,
    pub min_area_frac: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            k: 15,
            cluster_tol_frac: 0.05,
            freq_iou: 0.95,
            dedup_iou: 0.80,
            min_area_filter: false,
            min_area_frac: 0.001,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("consensus k must be >= 1"));
        }
        for (name, v) in [("freq_iou", self.freq_iou), ("dedup_iou", self.dedup_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("consensus {name} must be in (0, 1], got {v}")));
            }
        }
        if !(self.cluster_tol_frac > 0.0) {
            return Err(Error::invalid("consensus cluster_tol_frac must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.min_area_frac) {
            return Err(Error::invalid("consensus min_area_frac must be in [0, 1]"));
        }
        Ok(())
    }

    /// Absolute clustering cutoff for a `width`x`height` raster.
    pub fn cluster_tol(&self, width: usize, height: usize) -> f64 {
        self.cluster_tol_frac * ((width * height) as f64).sqrt()
    }
}

/// A superpixel's consensus mask, tagged with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSegment {
    pub mask: BitMask,
    pub source_image: String,
    pub class_label: String,
    pub segment_id: String,
}

pub fn identity_vector(m: &BitMask) -> Result<IdentityVector> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in m.iter_set() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("identity vector of an empty mask"));
    }
    let nf = n as f64;
    Ok(IdentityVector {
        cx: sx / nf,
        cy: sy / nf,
        scnt: nf.sqrt(),
    })
}

/// Single-linkage clustering of identity vectors with an absolute cutoff.
///
/// Clusters are listed by their smallest member, members ascending.
pub fn cluster_masks(masks: &[BitMask], cfg: &ConsensusConfig) -> Result<Vec<Vec<usize>>> {
    let Some(first) = masks.first() else {
        return Err(Error::invalid("cannot cluster an empty mask list"));
    };
    for m in masks {
        first.ensure_same_dims(m)?;
    }
    let tol = cfg.cluster_tol(first.width(), first.height());
    let ids = masks.iter().map(identity_vector).collect::<Result<Vec<_>>>()?;
    Ok(single_linkage(&ids, tol))
}

fn single_linkage(ids: &[IdentityVector], tol: f64) -> Vec<Vec<usize>> {
    // merging while the closest pair of clusters is within tol is the same as
    // taking connected components of the "within tol" graph
    let n = ids.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if ids[i].distance(&ids[j]) <= tol {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[r]].push(i);
    }
    clusters
}

/// Most frequent mask of a cluster, returned as an index into `masks`.
///
/// Masks join the first equivalence class whose representative they match
/// at IoU >= `freq_iou`; the largest class wins, ties going to the larger
/// representative and then the lower index.
pub fn select_anchor_index(masks: &[BitMask], cluster: &[usize], cfg: &ConsensusConfig) -> Result<usize> {
    if cluster.is_empty() {
        return Err(Error::invalid("cannot select an anchor from an empty cluster"));
    }
    let mut classes: Vec<(usize, usize)> = Vec::new(); // (representative, members)
    for &i in cluster {
        let mut joined = false;
        for class in classes.iter_mut() {
            if mask_iou(&masks[class.0], &masks[i])? >= cfg.freq_iou {
                class.1 += 1;
                joined = true;
                break;
            }
        }
        if !joined {
            classes.push((i, 1));
        }
    }
    let best = classes
        .iter()
        .max_by(|a, b| {
            a.1.cmp(&b.1)
                .then(masks[a.0].count().cmp(&masks[b.0].count()))
                .then(b.0.cmp(&a.0))
        })
        .expect("at least one class");
    Ok(best.0)
}

pub fn select_anchor(masks: &[BitMask], cluster: &[usize], cfg: &ConsensusConfig) -> Result<BitMask> {
    Ok(masks[select_anchor_index(masks, cluster, cfg)?].clone())
}

/// Greedy duplicate removal in descending-area order; an anchor is dropped
/// when it overlaps an already kept anchor at IoU >= `dedup_iou`. Survivors
/// keep their input order.
pub fn dedup_anchors(anchors: Vec<AnchorSegment>, dedup_iou: f64) -> Vec<AnchorSegment> {
    let areas: Vec<usize> = anchors.iter().map(|a| a.mask.count()).collect();
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let dup = kept.iter().any(|&k| {
            mask_iou(&anchors[k].mask, &anchors[i].mask).map(|iou| iou >= dedup_iou).unwrap_or(false)
        });
        if !dup {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let mut keep = vec![false; anchors.len()];
    for k in kept {
        keep[k] = true;
    }
    anchors
        .into_iter()
        .zip(keep)
        .filter_map(|(a, k)| k.then_some(a))
        .collect()
}

/// Runs the prompt-cluster-select loop over every superpixel of `img`.
///
/// Prompt points for superpixel `i` come from a stream derived from
/// `(seed, image_id, i)`. Failed prompts are skipped; a superpixel with at
/// least half its prompts failing is skipped.
pub fn anchors_for_image(
    img: &ImageRgb,
    image_id: &str,
    class_label: &str,
    sp: &SuperpixelMap,
    backend: &SegmenterBackend,
    cfg: &ConsensusConfig,
    seed: u64,
) -> Result<Vec<AnchorSegment>> {
    cfg.validate()?;
    if (sp.width(), sp.height()) != img.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            found: (sp.width(), sp.height()),
        });
    }
    let min_area = (cfg.min_area_frac * img.area() as f64).ceil() as usize;
    let mut anchors = Vec::new();
    for (label, pixels) in sp.regions().iter().enumerate() {
        let mut rng = derive_rng(seed, &["prompts", image_id, &label.to_string()]);
        let mut masks = Vec::with_capacity(cfg.k);
        let mut failures = 0;
        for _ in 0..cfg.k {
            let Some(p) = sample_point_in_pixels(pixels, sp.width(), &mut rng) else {
                failures += 1;
                continue;
            };
            match segment_at_point(backend, img, p) {
                Ok(m) => masks.push(m),
                Err(e) => {
                    log::debug!("{image_id}: prompt in superpixel {label} failed: {e}");
                    failures += 1;
                }
            }
        }
        if 2 * failures >= cfg.k || masks.is_empty() {
            log::warn!("{image_id}: skipping superpixel {label} ({failures}/{} prompts failed)", cfg.k);
            continue;
        }
        let clusters = cluster_masks(&masks, cfg)?;
        let mean_area = |c: &Vec<usize>| c.iter().map(|&i| masks[i].count()).sum::<usize>() as f64 / c.len() as f64;
        // largest cluster; ties go to the larger mean area, then the earlier cluster
        let best = clusters
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.len()
                    .cmp(&b.len())
                    .then(mean_area(a).total_cmp(&mean_area(b)))
                    .then(ib.cmp(ia))
            })
            .map(|(_, c)| c)
            .expect("nonempty mask list yields a cluster");
        let idx = select_anchor_index(&masks, best, cfg)?;
        let mask = masks.swap_remove(idx);
        if cfg.min_area_filter && mask.count() < min_area {
            continue;
        }
        anchors.push(AnchorSegment {
            mask,
            source_image: image_id.to_owned(),
            class_label: class_label.to_owned(),
            segment_id: format!("{}#s{label:03}", sanitize_id(image_id)),
        });
    }
    if anchors.is_empty() {
        return Err(Error::NoAnchors(format!("image {image_id}")));
    }
    Ok(dedup_anchors(anchors, cfg.dedup_iou))
}

/// Segment ids double as file names; keep them to a portable alphabet.
pub(crate) fn sanitize_id(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}
