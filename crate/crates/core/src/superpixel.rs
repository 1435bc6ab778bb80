//! SLIC superpixels.
//!
//! k-means in joint (CIELAB, position) space with grid-initialized centers,
//! followed by a connectivity pass that relabels 4-connected components and
//! folds small fragments into their largest neighbor.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ImageRgb, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicConfig {
    /// Target number of regions.
    pub n_s: usize,
    pub compactness: f64,
    pub max_iters: usize,
    /// Fragments smaller than this fraction of the mean region area are merged away.
    pub min_region_frac: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            n_s: 30,
            compactness: 10.0,
            max_iters: 10,
            min_region_frac: 0.25,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s == 0 {
            return Err(Error::invalid("slic n_s must be >= 1"));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::invalid("slic compactness must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("slic max_iters must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.min_region_frac) {
            return Err(Error::invalid("slic min_region_frac must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    n_regions: usize,
}

impl SuperpixelMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Flat pixel indices of every region, row-major within each region.
    pub fn regions(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_regions];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn region_pixels(&self, label: usize) -> Result<Vec<usize>> {
        if label >= self.n_regions {
            return Err(Error::invalid(format!(
                "superpixel label {label} out of range (map has {} regions)",
                self.n_regions
            )));
        }
        Ok(self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == label)
            .map(|(i, _)| i)
            .collect())
    }
}

/// Segments `img` into roughly `cfg.n_s` connected superpixels.
///
/// Center initialization is a fixed grid, so the result depends only on the
/// image and config; `_seed` is accepted for interface stability.
pub fn slic(img: &ImageRgb, cfg: &SlicConfig, _seed: u64) -> Result<SuperpixelMap> {
    cfg.validate()?;
    let (w, h) = img.dims();
    let area = w * h;
    if area < cfg.n_s {
        return Err(Error::invalid(format!(
            "image has {area} pixels, fewer than n_s = {}",
            cfg.n_s
        )));
    }

    let lab: Vec<[f64; 3]> = (0..area).map(|i| srgb_to_lab(img.pixel(i))).collect();

    // grid layout, at least as many columns as the aspect ratio suggests
    let nx = ((cfg.n_s as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w);
    let ny = ((cfg.n_s as f64 / nx as f64).round() as usize).clamp(1, h);
    let k = nx * ny;
    let step = (area as f64 / k as f64).sqrt();
    let spatial_weight = (cfg.compactness / step).powi(2);
    let win_x = w.div_ceil(nx) as isize;
    let win_y = h.div_ceil(ny) as isize;

    let gradient = |x: usize, y: usize| -> f64 {
        let at = |xx: usize, yy: usize| lab[yy * w + xx];
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        sq_dist(&at(xr, y), &at(xl, y)) + sq_dist(&at(x, yd), &at(x, yu))
    };

    let mut centers: Vec<Center> = Vec::with_capacity(k);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let cy = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let mut best = (gradient(cx, cy), cx, cy);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (px, py) = (cx as isize + dx, cy as isize + dy);
                    if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                        continue;
                    }
                    let g = gradient(px as usize, py as usize);
                    if g < best.0 {
                        best = (g, px as usize, py as usize);
                    }
                }
            }
            let (_, bx, by) = best;
            centers.push(Center {
                lab: lab[by * w + bx],
                x: bx as f64,
                y: by as f64,
            });
        }
    }

    let mut labels: Vec<u32> = (0..area)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            ((y * ny / h) * nx + x * nx / w) as u32
        })
        .collect();
    let mut dist = vec![f64::INFINITY; area];

    for _ in 0..cfg.max_iters {
        dist.fill(f64::INFINITY);
        let mut next = labels.clone();
        for (ci, c) in centers.iter().enumerate() {
            let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
            let x_lo = (cx - win_x).max(0) as usize;
            let x_hi = ((cx + win_x).min(w as isize - 1)) as usize;
            let y_lo = (cy - win_y).max(0) as usize;
            let y_hi = ((cy + win_y).min(h as isize - 1)) as usize;
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let i = y * w + x;
                    let ds = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                    let d = sq_dist(&lab[i], &c.lab) + ds * spatial_weight;
                    if d < dist[i] {
                        dist[i] = d;
                        next[i] = ci as u32;
                    }
                }
            }
        }

        let mut sums = vec![[0.0f64; 6]; k];
        for (i, &l) in next.iter().enumerate() {
            let s = &mut sums[l as usize];
            s[0] += lab[i][0];
            s[1] += lab[i][1];
            s[2] += lab[i][2];
            s[3] += (i % w) as f64;
            s[4] += (i / w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                let n = s[5];
                *c = Center {
                    lab: [s[0] / n, s[1] / n, s[2] / n],
                    x: s[3] / n,
                    y: s[4] / n,
                };
            }
        }

        let changed = next != labels;
        labels = next;
        if !changed {
            break;
        }
    }

    let min_size = ((cfg.min_region_frac * area as f64 / cfg.n_s as f64).floor() as usize).max(1);
    let (labels, n_regions) = enforce_connectivity(&labels, w, h, min_size, 2 * cfg.n_s);
    Ok(SuperpixelMap {
        width: w,
        height: h,
        labels,
        n_regions,
    })
}

struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// sRGB (D65) to CIELAB.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = |v: u8| {
        let c = f64::from(v) / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Splits labels into 4-connected components, then repeatedly merges the
/// smallest component into its largest neighbor while it is below
/// `min_size` or more than `max_regions` components remain. Output labels
/// are consecutive in scan order of first appearance.
pub(crate) fn enforce_connectivity(
    labels: &[u32],
    w: usize,
    h: usize,
    min_size: usize,
    max_regions: usize,
) -> (Vec<u32>, usize) {
    let area = w * h;
    let mut comp = vec![usize::MAX; area];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..area {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let label = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for n in neighbors4(i, w, h).into_iter().flatten() {
                if comp[n] == usize::MAX && labels[n] == label {
                    comp[n] = id;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }

    let n = sizes.len();
    let mut adjacency = vec![BTreeSet::new(); n];
    for i in 0..area {
        let (x, y) = (i % w, i / w);
        if x + 1 < w && comp[i] != comp[i + 1] {
            adjacency[comp[i]].insert(comp[i + 1]);
            adjacency[comp[i + 1]].insert(comp[i]);
        }
        if y + 1 < h && comp[i] != comp[i + w] {
            adjacency[comp[i]].insert(comp[i + w]);
            adjacency[comp[i + w]].insert(comp[i]);
        }
    }

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    let mut active = n;
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        sizes.iter().enumerate().map(|(i, &s)| Reverse((s, i))).collect();
    while let Some(Reverse((size, id))) = heap.pop() {
        if parent[id] != id || sizes[id] != size {
            continue;
        }
        if size >= min_size && active <= max_regions {
            break;
        }
        let nbrs: BTreeSet<usize> = adjacency[id]
            .iter()
            .map(|&a| find(&mut parent, a))
            .filter(|&r| r != id)
            .collect();
        let Some(&target) = nbrs.iter().max_by_key(|&&r| (sizes[r], Reverse(r))) else {
            // isolated component: nothing to merge into
            continue;
        };
        parent[id] = target;
        sizes[target] += sizes[id];
        let moved = std::mem::take(&mut adjacency[id]);
        adjacency[target].extend(moved);
        heap.push(Reverse((sizes[target], target)));
        active -= 1;
    }

    let mut remap = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut out = vec![0u32; area];
    for i in 0..area {
        let root = find(&mut parent, comp[i]);
        if remap[root] == u32::MAX {
            remap[root] = next;
            next += 1;
        }
        out[i] = remap[root];
    }
    (out, next as usize)
}

pub(crate) fn neighbors4(i: usize, w: usize, h: usize) -> [Option<usize>; 4] {
    let (x, y) = (i % w, i / w);
    [
        (y > 0).then(|| i - w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y + 1 < h).then(|| i + w),
    ]
}

/// Uniformly samples an integer pixel of region `label`.
pub fn sample_point_in_region(map: &SuperpixelMap, label: usize, rng: &mut impl Rng) -> Result<Point> {
    let pixels = map.region_pixels(label)?;
    sample_point_in_pixels(&pixels, map.width, rng)
        .ok_or_else(|| Error::invalid(format!("superpixel {label} is empty")))
}

pub(crate) fn sample_point_in_pixels(pixels: &[usize], width: usize, rng: &mut impl Rng) -> Option<Point> {
    if pixels.is_empty() {
        return None;
    }
    let i = pixels[rng.random_range(0..pixels.len())];
    Some(Point::new((i % width) as f64, (i / width) as f64))
}
