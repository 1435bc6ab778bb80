//! Image and mask primitives.
//!
//! Coordinates follow the raster convention used throughout the crate: `x` is
//! the column, `y` the row, pixel centers sit on integer coordinates and all
//! buffers are row-major.

use std::io::Cursor;

use image::{ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// 8-bit sRGB image, row-major RGB triples.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageRgb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageRgb")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageRgb {
    /// A black image.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            data: vec![0; width * height * 3],
        })
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "RGB buffer holds {} bytes, expected {} for {width}x{height}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel at flat row-major index.
    #[inline]
    pub fn pixel(&self, idx: usize) -> [u8; 3] {
        let i = idx * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, idx: usize, rgb: [u8; 3]) {
        let i = idx * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// One color channel as `f64`, row-major.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| f64::from(v)).collect()
    }

    /// Copy of the inclusive box `bb`.
    pub fn crop(&self, bb: &BBox) -> Result<ImageRgb> {
        if bb.x1 >= self.width || bb.y1 >= self.height || bb.x0 > bb.x1 || bb.y0 > bb.y1 {
            return Err(Error::invalid(format!(
                "crop box {bb:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        ImageRgb::from_fn(bb.width(), bb.height(), |x, y| self.get(bb.x0 + x, bb.y0 + y))
    }

    /// Places images side by side, top-aligned, on a black canvas.
    pub fn hconcat(images: &[&ImageRgb]) -> Result<ImageRgb> {
        let width = images.iter().map(|im| im.width).sum();
        let height = images.iter().map(|im| im.height).max().unwrap_or(0);
        let mut out = ImageRgb::new(width, height)?;
        let mut x0 = 0;
        for im in images {
            for y in 0..im.height {
                for x in 0..im.width {
                    out.set(x0 + x, y, im.get(x, y));
                }
            }
            x0 += im.width;
        }
        Ok(out)
    }
}

/// Binary mask over a raster; `true` marks pixels inside the segment.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BitMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BitMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn full(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            bits: vec![true; width * height],
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        if bits.len() != width * height {
            return Err(Error::invalid(format!(
                "mask holds {} bits, expected {} for {width}x{height}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Mask with the listed `(x, y)` pixels set.
    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::new(width, height)?;
        for &(x, y) in pixels {
            if x >= width || y >= height {
                return Err(Error::invalid(format!("pixel ({x},{y}) outside {width}x{height} mask")));
            }
            m.set(x, y, true);
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    #[inline]
    pub fn at(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    #[inline]
    pub fn set_at(&mut self, idx: usize, v: bool) {
        self.bits[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// `(x, y)` of every set pixel in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn ensure_same_dims(&self, other: &BitMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &BitMask, f: impl Fn(bool, bool) -> bool) -> Result<BitMask> {
        self.ensure_same_dims(other)?;
        Ok(BitMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BitMask) -> Result<BitMask> {
        self.zip_with(other, |a, b| a && b)
    }

    /// `self \ other`
    pub fn difference(&self, other: &BitMask) -> Result<BitMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> BitMask {
        BitMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// Shifts set pixels by `(dx, dy)`; pixels leaving the raster are dropped.
    pub fn translate(&self, dx: isize, dy: isize) -> BitMask {
        let mut out = BitMask {
            width: self.width,
            height: self.height,
            bits: vec![false; self.bits.len()],
        };
        for (x, y) in self.iter_set() {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                out.set(nx as usize, ny as usize, true);
            }
        }
        out
    }
}

/// Sub-pixel location; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Integer pixel containing the point, if it lies on a `width`x`height` raster.
    pub fn pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        if !(self.x.is_finite() && self.y.is_finite()) || self.x < 0.0 || self.y < 0.0 {
            return None;
        }
        let (x, y) = (self.x.floor() as usize, self.y.floor() as usize);
        (x < width && y < height).then_some((x, y))
    }
}

/// `(x, y) -> (a*x + b*y + c, d*x + e*y + f)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform2D {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl AffineTransform2D {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
        e: 1.0,
        f: 0.0,
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            c: dx,
            f: dy,
            ..Self::IDENTITY
        }
    }

    /// Isotropic scale `s` followed by translation `(tx, ty)`.
    pub fn scale_translate(s: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: s,
            b: 0.0,
            c: tx,
            d: 0.0,
            e: s,
            f: ty,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.e - self.b * self.d
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.c,
            self.d * x + self.e * y + self.f,
        )
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::NotInvertible(det));
        }
        let (a, b, d, e) = (self.e / det, -self.b / det, -self.d / det, self.a / det);
        Ok(Self {
            a,
            b,
            c: -(a * self.c + b * self.f),
            d,
            e,
            f: -(d * self.c + e * self.f),
        })
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("raster dimensions must be positive, got {width}x{height}")));
    }
    Ok(())
}

/// Decodes a PNG (or JPEG) stream into RGB, dropping any alpha channel.
pub fn decode_image(bytes: &[u8]) -> Result<ImageRgb> {
    let img = decode_dynamic(bytes)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageRgb::from_raw(w, h, img.into_raw())
}

/// Decodes a grayscale mask image; any nonzero luma counts as set.
pub fn decode_mask(bytes: &[u8]) -> Result<BitMask> {
    let img = decode_dynamic(bytes)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BitMask::from_bits(w, h, img.into_raw().into_iter().map(|v| v != 0).collect())
}

fn decode_dynamic(bytes: &[u8]) -> Result<image::DynamicImage> {
    let decode_err = |message: String| Error::Decode {
        len: bytes.len(),
        offset: png_fault_offset(bytes),
        message,
    };
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        Some(other) => return Err(decode_err(format!("unsupported format {other:?}"))),
        None => return Err(decode_err("unrecognized image signature".into())),
    }
    reader.decode().map_err(|e| decode_err(e.to_string()))
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Walks the PNG chunk layout and returns the offset of the first structural
/// fault (bad signature or truncated chunk). Used only to annotate errors.
fn png_fault_offset(bytes: &[u8]) -> Option<usize> {
    if bytes.len() < PNG_SIGNATURE.len() {
        return Some(bytes.len());
    }
    if bytes[..8] != PNG_SIGNATURE {
        return bytes[..8].iter().zip(&PNG_SIGNATURE).position(|(a, b)| a != b);
    }
    let mut pos = 8;
    loop {
        if pos + 8 > bytes.len() {
            return Some(pos);
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().ok()?) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        let end = pos + 12 + len;
        if end > bytes.len() {
            return Some(pos);
        }
        if kind == b"IEND" {
            return None;
        }
        pos = end;
    }
}

/// Rasters that can be written as lossless PNG.
pub trait EncodePng {
    fn encode_png(&self) -> Vec<u8>;
}

impl EncodePng for ImageRgb {
    fn encode_png(&self) -> Vec<u8> {
        write_png(&self.data, self.width, self.height, image::ExtendedColorType::Rgb8)
    }
}

impl EncodePng for BitMask {
    /// Grayscale, 0 outside and 255 inside.
    fn encode_png(&self) -> Vec<u8> {
        let luma: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_png(&luma, self.width, self.height, image::ExtendedColorType::L8)
    }
}

pub fn encode_png<R: EncodePng>(raster: &R) -> Vec<u8> {
    raster.encode_png()
}

fn write_png(buf: &[u8], width: usize, height: usize, color: image::ExtendedColorType) -> Vec<u8> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(buf, width as u32, height as u32, color)
        .expect("buffer length matches validated raster dimensions");
    out
}

/// IoU of two same-size masks; 0 when both are empty.
pub fn mask_iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Tightest box around the set pixels.
pub fn mask_bbox(m: &BitMask) -> Result<BBox> {
    let mut bb: Option<BBox> = None;
    for (x, y) in m.iter_set() {
        bb = Some(match bb {
            None => BBox {
                x0: x,
                y0: y,
                x1: x,
                y1: y,
            },
            Some(b) => BBox {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x),
                y1: b.y1.max(y),
            },
        });
    }
    bb.ok_or(Error::EmptyMask("bounding box of an empty mask"))
}

/// Dilation with a `(2r+1)`-square structuring element.
pub fn dilate(m: &BitMask, radius: usize) -> BitMask {
    if radius == 0 {
        return m.clone();
    }
    let (w, h) = m.dims();
    // separable: a horizontal pass then a vertical pass, each a sliding-window OR
    let mut rows = vec![false; w * h];
    for y in 0..h {
        let row = &m.bits[y * w..(y + 1) * w];
        let prefix = prefix_counts(row.iter().copied());
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius + 1).min(w);
            rows[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    let mut out = vec![false; w * h];
    for x in 0..w {
        let prefix = prefix_counts((0..h).map(|y| rows[y * w + x]));
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius + 1).min(h);
            out[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    BitMask {
        width: w,
        height: h,
        bits: out,
    }
}

/// Erosion with a `(2r+1)`-square element; pixels outside the raster count
/// as set, so a full mask erodes to itself.
pub fn erode(m: &BitMask, radius: usize) -> BitMask {
    dilate(&m.complement(), radius).complement()
}

fn prefix_counts(it: impl Iterator<Item = bool>) -> Vec<usize> {
    let mut acc = vec![0];
    let mut run = 0;
    for b in it {
        run += usize::from(b);
        acc.push(run);
    }
    acc
}

/// Rasters that can be resampled through an affine map.
pub trait Warp: Sized {
    /// Inverse-mapping warp of `self` through `t` onto an `out_w`x`out_h` raster.
    fn warp_affine(&self, t: &AffineTransform2D, out_w: usize, out_h: usize) -> Result<Self>;
}

pub fn warp_affine<R: Warp>(src: &R, t: &AffineTransform2D, out_w: usize, out_h: usize) -> Result<R> {
    src.warp_affine(t, out_w, out_h)
}

impl Warp for ImageRgb {
    /// Bilinear sampling; samples further than half a pixel outside the
    /// source are black.
    fn warp_affine(&self, t: &AffineTransform2D, out_w: usize, out_h: usize) -> Result<Self> {
        let inv = t.inverse()?;
        ImageRgb::from_fn(out_w, out_h, |x, y| {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            self.sample_bilinear(sx, sy).unwrap_or([0, 0, 0])
        })
    }
}

impl ImageRgb {
    /// Bilinear sample at `(sx, sy)`; `None` outside the half-pixel border.
    pub fn sample_bilinear(&self, sx: f64, sy: f64) -> Option<[u8; 3]> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(sx >= -0.5 && sx < w - 0.5 && sy >= -0.5 && sy < h - 0.5) {
            return None;
        }
        let sx = sx.clamp(0.0, w - 1.0);
        let sy = sy.clamp(0.0, h - 1.0);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let (p00, p10, p01, p11) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
            let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
            out[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        Some(out)
    }
}

impl Warp for BitMask {
    /// Nearest-neighbor sampling keeps the result binary.
    fn warp_affine(&self, t: &AffineTransform2D, out_w: usize, out_h: usize) -> Result<Self> {
        let inv = t.inverse()?;
        BitMask::from_fn(out_w, out_h, |x, y| {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let (ix, iy) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            ix >= 0.0
                && iy >= 0.0
                && (ix as usize) < self.width
                && (iy as usize) < self.height
                && self.get(ix as usize, iy as usize)
        })
    }
}
