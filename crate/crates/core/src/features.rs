//! Segment descriptors and PCA reduction.
//!
//! Anchors are cropped by bounding box, resized to 224x224 and described
//! either by the builtin color/gradient histogram descriptor or by deep
//! features computed offline and ingested from a feature file. Each class
//! pool then fits its own PCA model and keeps the projected vectors.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{mask_bbox, BitMask, ImageRgb};

pub const PATCH_SIZE: usize = 224;
pub const DEFAULT_PCA_DIM: usize = 128;

const FEATURE_MAGIC: &[u8; 5] = b"USGF1";
const PCA_MAGIC: &[u8; 5] = b"USGP1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Rounds every entry to the nearest `f32`, the precision of the
    /// on-disk formats.
    pub fn to_f32_precision(&self) -> Self {
        Self(self.0.iter().map(|&v| f64::from(v as f32)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorConfig {
    pub bins_per_channel: usize,
    pub gradient_bins: usize,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            bins_per_channel: 32,
            gradient_bins: 16,
        }
    }
}

impl DescriptorConfig {
    pub fn dim(&self) -> usize {
        3 * self.bins_per_channel + self.gradient_bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins_per_channel < 2 || self.gradient_bins < 2 {
            return Err(Error::invalid("descriptor bins must be >= 2"));
        }
        if self.bins_per_channel > 256 {
            return Err(Error::invalid("descriptor bins_per_channel must be <= 256"));
        }
        Ok(())
    }
}

/// Bilinear resize with corner alignment: output corners sample input corners.
pub fn resize_bilinear(img: &ImageRgb, out_w: usize, out_h: usize) -> Result<ImageRgb> {
    let scale = |n_in: usize, n_out: usize| {
        if n_out <= 1 {
            0.0
        } else {
            (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let (sx, sy) = (scale(img.width(), out_w), scale(img.height(), out_h));
    ImageRgb::from_fn(out_w, out_h, |x, y| {
        img.sample_bilinear(x as f64 * sx, y as f64 * sy)
            .expect("corner-aligned samples stay inside the source")
    })
}

/// Bounding-box crop of the full image content (no mask cut), resized to
/// 224x224.
pub fn crop_resize(img: &ImageRgb, m: &BitMask) -> Result<ImageRgb> {
    if m.dims() != img.dims() {
        return Err(Error::DimensionMismatch {
            expected: img.dims(),
            found: m.dims(),
        });
    }
    let bb = mask_bbox(m)?;
    resize_bilinear(&img.crop(&bb)?, PATCH_SIZE, PATCH_SIZE)
}

/// L1-normalized R, G, B intensity histograms followed by an L1-normalized
/// gradient-magnitude histogram of the gray image.
///
/// Gradients are central differences with edge replication, so magnitudes
/// fall in `[0, 255*sqrt(2)]`, which is binned uniformly.
pub fn builtin_descriptor(patch: &ImageRgb, cfg: &DescriptorConfig) -> Result<FeatureVector> {
    cfg.validate()?;
    if patch.dims() != (PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::DimensionMismatch {
            expected: (PATCH_SIZE, PATCH_SIZE),
            found: patch.dims(),
        });
    }
    let (w, h) = patch.dims();
    let n = (w * h) as f64;
    let bins = cfg.bins_per_channel;
    let mut out = vec![0.0; cfg.dim()];
    for i in 0..w * h {
        let p = patch.pixel(i);
        for c in 0..3 {
            out[c * bins + usize::from(p[c]) * bins / 256] += 1.0;
        }
    }

    let gray: Vec<f64> = (0..w * h)
        .map(|i| {
            let p = patch.pixel(i);
            (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / 3.0
        })
        .collect();
    let max_mag = 255.0 * std::f64::consts::SQRT_2;
    let g0 = 3 * bins;
    for y in 0..h {
        for x in 0..w {
            let gx = gray[y * w + (x + 1).min(w - 1)] - gray[y * w + x.saturating_sub(1)];
            let gy = gray[(y + 1).min(h - 1) * w + x] - gray[y.saturating_sub(1) * w + x];
            let mag = (gx * gx + gy * gy).sqrt();
            let b = ((mag / max_mag * cfg.gradient_bins as f64) as usize).min(cfg.gradient_bins - 1);
            out[g0 + b] += 1.0;
        }
    }
    for v in out.iter_mut() {
        *v /= n;
    }
    Ok(FeatureVector(out))
}

/// Serializes `(id, vector)` records in the binary feature-file format.
///
/// Layout (little-endian): `"USGF1"`, u32 record count, u32 dim, then per
/// record a u16 id length, the UTF-8 id and `dim` f32 values.
pub fn encode_feature_file(records: &[(String, FeatureVector)]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |(_, v)| v.dim());
    let mut out = Vec::with_capacity(13 + records.len() * (8 + 4 * dim));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| Error::invalid("too many feature records"))?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(dim).map_err(|_| Error::invalid("feature dim too large"))?.to_le_bytes());
    for (i, (id, v)) in records.iter().enumerate() {
        if v.dim() != dim {
            return Err(Error::invalid(format!(
                "record {i} (id {id:?}) has dim {}, expected {dim}",
                v.dim()
            )));
        }
        let len = u16::try_from(id.len()).map_err(|_| Error::invalid(format!("record {i}: id longer than 65535 bytes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for &x in v.values() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, context: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.what,
                format!("truncated at byte {} while reading {}", self.pos, context()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, context: impl FnOnce() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, context: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, context: impl FnOnce() -> String) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4, context)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.what,
                format!("{} trailing bytes after byte {}", self.bytes.len() - self.pos, self.pos),
            ));
        }
        Ok(())
    }
}

/// Parses a feature file, validating ids and values record by record.
pub fn decode_feature_file(bytes: &[u8]) -> Result<Vec<(String, FeatureVector)>> {
    let mut r = ByteReader {
        bytes,
        pos: 0,
        what: "feature file",
    };
    if r.take(5, || "magic".into())? != FEATURE_MAGIC {
        return Err(Error::format("feature file", "bad magic, expected USGF1"));
    }
    let count = r.u32(|| "record count".into())? as usize;
    let dim = r.u32(|| "dim".into())? as usize;
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let len = r.u16(|| format!("record {i} id length"))? as usize;
        let id_bytes = r.take(len, || format!("record {i} id"))?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|e| Error::format("feature file", format!("record {i}: id is not UTF-8: {e}")))?
            .to_owned();
        let values = r.f32s(dim, || format!("record {i} (id {id:?}) values: dimension mismatch"))?;
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                "feature file",
                format!("record {i} (id {id:?}) has a non-finite value at index {j}"),
            ));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::format("feature file", format!("record {i}: duplicate id {id:?}")));
        }
        out.push((id, FeatureVector(values)));
    }
    r.finish()?;
    Ok(out)
}

/// Loads externally computed features keyed by segment id.
pub fn ingest_external_features(path: &Path) -> Result<BTreeMap<String, FeatureVector>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_feature_file(&bytes)?.into_iter().collect())
}

pub fn export_features(path: &Path, records: &[(String, FeatureVector)]) -> Result<()> {
    let bytes = encode_feature_file(records)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Principal axes of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `p'` rows of length `d`, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues of the sample covariance, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    /// Zero-dimensional model for pools with a single vector, where no
    /// covariance exists.
    pub fn degenerate(mean: Vec<f64>) -> Self {
        Self {
            mean,
            components: Vec::new(),
            explained_variance: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    /// `components * (v - mean)`
    pub fn transform(&self, v: &FeatureVector) -> Result<FeatureVector> {
        if v.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: (self.input_dim(), 1),
                found: (v.dim(), 1),
            });
        }
        Ok(FeatureVector(
            self.components
                .iter()
                .map(|row| row.iter().zip(v.values()).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
                .collect(),
        ))
    }

    /// `mean + components^T * z`
    pub fn inverse_transform(&self, z: &FeatureVector) -> Result<FeatureVector> {
        if z.dim() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: (self.output_dim(), 1),
                found: (z.dim(), 1),
            });
        }
        let mut out = self.mean.clone();
        for (row, &zi) in self.components.iter().zip(z.values()) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c * zi;
            }
        }
        Ok(FeatureVector(out))
    }

    /// Same model with every number rounded to `f32`, i.e. exactly what
    /// survives a save/load cycle.
    pub fn to_f32_precision(&self) -> Self {
        let r = |v: &[f64]| v.iter().map(|&x| f64::from(x as f32)).collect::<Vec<_>>();
        Self {
            mean: r(&self.mean),
            components: self.components.iter().map(|row| r(row)).collect(),
            explained_variance: r(&self.explained_variance),
        }
    }

    /// Layout (little-endian): `"USGP1"`, u32 d, u32 p', mean (d f32),
    /// components (p' x d f32, row-major), eigenvalues (p' f32).
    pub fn encode(&self) -> Vec<u8> {
        let (d, p) = (self.input_dim(), self.output_dim());
        let mut out = Vec::with_capacity(13 + 4 * (d + p * d + p));
        out.extend_from_slice(PCA_MAGIC);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(p as u32).to_le_bytes());
        let rows = std::iter::once(&self.mean)
            .chain(self.components.iter())
            .chain(std::iter::once(&self.explained_variance));
        for row in rows {
            for &v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            what: "PCA model",
        };
        if r.take(5, || "magic".into())? != PCA_MAGIC {
            return Err(Error::format("PCA model", "bad magic, expected USGP1"));
        }
        let d = r.u32(|| "d".into())? as usize;
        let p = r.u32(|| "p'".into())? as usize;
        if p > d {
            return Err(Error::format("PCA model", format!("p' = {p} exceeds d = {d}")));
        }
        let mean = r.f32s(d, || "mean".into())?;
        let components = (0..p)
            .map(|i| r.f32s(d, || format!("component {i}")))
            .collect::<Result<Vec<_>>>()?;
        let explained_variance = r.f32s(p, || "eigenvalues".into())?;
        r.finish()?;
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }
}

/// Fits PCA on the sample covariance, keeping `min(p, d, n-1)` components in
/// descending eigenvalue order. Each component is signed so that its
/// largest-magnitude entry is positive.
pub fn pca_fit(vectors: &[FeatureVector], p: usize) -> Result<PcaModel> {
    if vectors.len() < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 vectors, got {}", vectors.len())));
    }
    let d = vectors[0].dim();
    if d == 0 {
        return Err(Error::invalid("PCA on zero-dimensional vectors"));
    }
    if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.dim() != d) {
        return Err(Error::invalid(format!("vector {i} has dim {}, expected {d}", v.dim())));
    }
    let n = vectors.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| vectors.iter().map(|v| v.0[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i].0[j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let keep = p.min(d).min(n - 1);
    let mut components = Vec::with_capacity(keep);
    let mut explained_variance = Vec::with_capacity(keep);
    for &k in order.iter().take(keep) {
        let mut row: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let pivot = row
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
            .0;
        if row[pivot] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

pub fn pca_transform(model: &PcaModel, v: &FeatureVector) -> Result<FeatureVector> {
    model.transform(v)
}
