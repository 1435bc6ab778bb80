//! Point-prompted segmentation.
//!
//! The builtin backend is a deterministic color flood fill; anything smarter
//! (a foundation segmentation model) runs out of process behind
//! [`crate::backend`].

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backend::BackendHandle;
use crate::error::{Error, Result};
use crate::raster::{BitMask, ImageRgb, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloodFillConfig {
    /// Max per-channel absolute difference from the seed color.
    pub color_tol: u8,
    pub connectivity: Connectivity,
    /// Cap on the mask size as a fraction of the image.
    pub max_frac: f64,
}

impl Default for FloodFillConfig {
    fn default() -> Self {
        Self {
            color_tol: 25,
            connectivity: Connectivity::Four,
            max_frac: 0.9,
        }
    }
}

pub type SharedBackend = Arc<Mutex<BackendHandle>>;

#[derive(Debug, Clone)]
pub enum SegmenterBackend {
    FloodFill(FloodFillConfig),
    External(SharedBackend),
}

impl SegmenterBackend {
    pub fn is_builtin(&self) -> bool {
        matches!(self, SegmenterBackend::FloodFill(_))
    }
}

/// One mask containing the pixel under `p`.
pub fn segment_at_point(backend: &SegmenterBackend, img: &ImageRgb, p: Point) -> Result<BitMask> {
    let (px, py) = p
        .pixel(img.width(), img.height())
        .ok_or_else(|| Error::invalid(format!("prompt {p:?} outside {}x{} image", img.width(), img.height())))?;
    let mask = match backend {
        SegmenterBackend::FloodFill(cfg) => floodfill_segment(img, p, cfg)?,
        SegmenterBackend::External(handle) => {
            let mut h = handle.lock().unwrap_or_else(|e| e.into_inner());
            h.request_segment(img, p)?
        }
    };
    if mask.is_empty() {
        return Err(Error::Backend("segmenter returned an empty mask".into()));
    }
    if !mask.get(px, py) {
        return Err(Error::Backend(format!(
            "segmenter mask does not contain the prompt pixel ({px},{py})"
        )));
    }
    Ok(mask)
}

/// Connected region of pixels within `color_tol` of the seed color, grown
/// breadth-first and truncated to `max_frac` of the image in BFS order.
pub fn floodfill_segment(img: &ImageRgb, p: Point, cfg: &FloodFillConfig) -> Result<BitMask> {
    let (w, h) = img.dims();
    let (sx, sy) = p
        .pixel(w, h)
        .ok_or_else(|| Error::invalid(format!("seed {p:?} outside {w}x{h} image")))?;
    let cap = ((cfg.max_frac * (w * h) as f64).floor() as usize).clamp(1, w * h);
    let seed = img.get(sx, sy);
    let tol = i16::from(cfg.color_tol);
    let within = |c: [u8; 3]| (0..3).all(|k| (i16::from(c[k]) - i16::from(seed[k])).abs() <= tol);

    let offsets: &[(isize, isize)] = match cfg.connectivity {
        Connectivity::Four => &[(0, -1), (-1, 0), (1, 0), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)],
    };

    let mut mask = BitMask::new(w, h)?;
    let mut queue = VecDeque::from([(sx, sy)]);
    mask.set(sx, sy, true);
    let mut count = 1;
    'grow: while let Some((x, y)) = queue.pop_front() {
        for &(dx, dy) in offsets {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if mask.get(nx, ny) || !within(img.get(nx, ny)) {
                continue;
            }
            if count == cap {
                break 'grow;
            }
            mask.set(nx, ny, true);
            count += 1;
            queue.push_back((nx, ny));
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_cfg(tol: u8) -> FloodFillConfig {
        FloodFillConfig { color_tol: tol, connectivity: Connectivity::Four, max_frac: 1.0 }
    }

    /// Fixed-point closure: a pixel is in when it is within tolerance and
    /// touches a pixel already in. Independent of queue order.
    fn closure_oracle(img: &ImageRgb, seed: (usize, usize), tol: u8) -> BitMask {
        let (w, h) = img.dims();
        let s = img.get(seed.0, seed.1);
        let ok = |c: [u8; 3]| (0..3).all(|k| (c[k] as i32 - s[k] as i32).abs() <= tol as i32);
        let mut m = BitMask::from_pixels(w, h, &[seed]).unwrap();
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    if m.get(x, y) || !ok(img.get(x, y)) {
                        continue;
                    }
                    let touches = (x > 0 && m.get(x - 1, y))
                        || (x + 1 < w && m.get(x + 1, y))
                        || (y > 0 && m.get(x, y - 1))
                        || (y + 1 < h && m.get(x, y + 1));
                    if touches {
                        m.set(x, y, true);
                        changed = true;
                    }
                }
            }
            if !changed {
                return m;
            }
        }
    }

    #[test]
    fn uniform_image() {
        let img = ImageRgb::filled(10, 10, [50, 50, 50]).unwrap();
        let backend = SegmenterBackend::FloodFill(full_cfg(25));
        let m = segment_at_point(&backend, &img, Point::new(3.0, 3.0)).unwrap();
        assert_eq!(m, BitMask::full(10, 10).unwrap());

        let capped = FloodFillConfig { max_frac: 0.9, ..full_cfg(25) };
        let m = floodfill_segment(&img, Point::new(3.0, 3.0), &capped).unwrap();
        assert_eq!(m.count(), 90);
        assert!(m.get(3, 3));
    }

    #[test]
    fn black_white_halves() {
        let img = ImageRgb::from_fn(8, 6, |x, _| if x < 4 { [0; 3] } else { [255; 3] }).unwrap();
        let backend = SegmenterBackend::FloodFill(full_cfg(254));
        let m = segment_at_point(&backend, &img, Point::new(6.5, 2.5)).unwrap();
        assert_eq!(m, BitMask::from_fn(8, 6, |x, _| x >= 4).unwrap());
    }

    #[test]
    fn nested_rings_middle_only() {
        // Chebyshev rings around the center: radius < 4 inner, < 8 middle, else outer
        let colors = [[200, 30, 30], [30, 200, 30], [30, 30, 200]];
        let ring = |x: usize, y: usize| {
            let d = (x as i64 - 12).abs().max((y as i64 - 12).abs());
            if d < 4 { 0 } else if d < 8 { 1 } else { 2 }
        };
        let img = ImageRgb::from_fn(25, 25, |x, y| colors[ring(x, y)]).unwrap();
        let backend = SegmenterBackend::FloodFill(full_cfg(25));
        let m = segment_at_point(&backend, &img, Point::new(12.0, 6.0)).unwrap();
        // oracle: connected component of equal color containing the seed
        let oracle = closure_oracle(&img, (12, 6), 0);
        assert_eq!(m, oracle);
        assert!(m.iter_set().all(|(x, y)| ring(x, y) == 1));
    }

    #[test]
    fn tolerance_extremes() {
        let img = ImageRgb::from_fn(7, 7, |x, y| if (x, y) == (3, 3) { [1, 2, 3] } else { [100, 100, 100] }).unwrap();
        let m = floodfill_segment(&img, Point::new(3.0, 3.0), &full_cfg(0)).unwrap();
        assert_eq!(m.iter_set().collect::<Vec<_>>(), vec![(3, 3)]);
        let m = floodfill_segment(&img, Point::new(3.0, 3.0), &full_cfg(255)).unwrap();
        assert_eq!(m.count(), 49);
    }

    #[test]
    fn gradient_band_matches_closure() {
        let img = ImageRgb::from_fn(32, 12, |x, _| {
            let v = (x * 8) as u8;
            [v, v, v]
        })
        .unwrap();
        let m = floodfill_segment(&img, Point::new(15.0, 5.0), &full_cfg(25)).unwrap();
        assert_eq!(m, closure_oracle(&img, (15, 5), 25));
        let cols: std::collections::BTreeSet<usize> = m.iter_set().map(|(x, _)| x).collect();
        assert_eq!(cols, (12..=18).collect());
    }

    #[test]
    fn random_images_match_closure_and_contain_seed() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let img = ImageRgb::from_fn(15, 11, |_, _| {
                let v = rng.random_range(0..4u8) * 30;
                [v, v, v]
            })
            .unwrap();
            let seed = (rng.random_range(0..15), rng.random_range(0..11));
            let p = Point::new(seed.0 as f64 + 0.3, seed.1 as f64 + 0.7);
            let m = floodfill_segment(&img, p, &full_cfg(25)).unwrap();
            assert!(m.get(seed.0, seed.1));
            assert_eq!(m, closure_oracle(&img, seed, 25));
            assert_eq!(m, floodfill_segment(&img, p, &full_cfg(25)).unwrap());
        }
    }

    #[test]
    fn eight_connectivity_crosses_diagonals() {
        let img = ImageRgb::from_fn(3, 3, |x, y| if x == y { [0; 3] } else { [255; 3] }).unwrap();
        let four = floodfill_segment(&img, Point::new(0.0, 0.0), &full_cfg(10)).unwrap();
        assert_eq!(four.count(), 1);
        let eight_cfg = FloodFillConfig { connectivity: Connectivity::Eight, ..full_cfg(10) };
        let eight = floodfill_segment(&img, Point::new(0.0, 0.0), &eight_cfg).unwrap();
        assert_eq!(eight.count(), 3);
    }

    #[test]
    fn prompt_outside_image_rejected() {
        let img = ImageRgb::filled(4, 4, [0; 3]).unwrap();
        let backend = SegmenterBackend::FloodFill(FloodFillConfig::default());
        assert!(segment_at_point(&backend, &img, Point::new(4.0, 0.0)).is_err());
        assert!(segment_at_point(&backend, &img, Point::new(-0.5, 0.0)).is_err());
    }
}
