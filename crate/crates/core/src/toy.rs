//! Synthetic corpus of flat-colored geometric textures, for demos and
//! end-to-end tests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{EncodePng, ImageRgb};
use crate::seed::derive_rng;

pub const TOY_CLASSES: [&str; 3] = ["disks", "stripes", "tiles"];

const PALETTES: [[[u8; 3]; 4]; 3] = [
    [[235, 200, 210], [150, 40, 110], [90, 30, 140], [200, 90, 150]],
    [[250, 230, 200], [200, 120, 60], [120, 70, 40], [230, 180, 90]],
    [[210, 230, 240], [60, 120, 180], [30, 60, 110], [140, 190, 220]],
];

/// Jitter of at most +-6 per channel keeps regions inside a flood-fill
/// tolerance of 25 while giving the descriptor some texture.
fn jitter(rng: &mut impl Rng, c: [u8; 3]) -> [u8; 3] {
    let d: i16 = rng.random_range(-6..=6);
    c.map(|v| (i16::from(v) + d).clamp(0, 255) as u8)
}

/// One image of class `class` (an index into [`TOY_CLASSES`]).
pub fn toy_image(class: usize, width: usize, height: usize, seed: u64) -> Result<ImageRgb> {
    let name = TOY_CLASSES
        .get(class)
        .ok_or_else(|| Error::invalid(format!("toy class {class} out of range")))?;
    let pal = PALETTES[class];
    let mut rng = derive_rng(seed, &["toy", name]);
    let (wf, hf) = (width as f64, height as f64);
    let base: Vec<usize> = match class {
        0 => {
            let n = rng.random_range(3..=5);
            let disks: Vec<(f64, f64, f64, usize)> = (0..n)
                .map(|k| {
                    let r = rng.random_range(0.11..0.24) * wf.min(hf);
                    (rng.random_range(0.0..wf), rng.random_range(0.0..hf), r, 1 + k % 3)
                })
                .collect();
            (0..width * height)
                .map(|i| {
                    let (x, y) = ((i % width) as f64, (i / width) as f64);
                    disks
                        .iter()
                        .rev()
                        .find(|(cx, cy, r, _)| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
                        .map_or(0, |d| d.3)
                })
                .collect()
        }
        1 => {
            let vertical = rng.random_bool(0.5);
            let extent = if vertical { width } else { height };
            let mut bands = Vec::new();
            let mut k = rng.random_range(0..4);
            while bands.len() < extent {
                let len = rng.random_range(extent / 8..=extent / 3).max(1);
                bands.extend(std::iter::repeat_n(k % 4, len));
                k += 1 + rng.random_range(0..2);
            }
            (0..width * height)
                .map(|i| bands[if vertical { i % width } else { i / width }])
                .collect()
        }
        _ => {
            let (nx, ny) = (rng.random_range(2..=3), rng.random_range(2..=3));
            let colors: Vec<usize> = (0..nx * ny).map(|k| (k + rng.random_range(0..2)) % 4).collect();
            (0..width * height)
                .map(|i| {
                    let (tx, ty) = ((i % width) * nx / width, (i / width) * ny / height);
                    colors[ty * nx + tx]
                })
                .collect()
        }
    };
    ImageRgb::from_fn(width, height, |x, y| jitter(&mut rng, pal[base[y * width + x]]))
}

/// Writes `per_class` PNGs per class under `root/<class>/` and returns their
/// paths in order.
pub fn write_toy_corpus(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (c, name) in TOY_CLASSES.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for k in 0..per_class {
            let img = toy_image(c, size, size, seed.wrapping_add(k as u64))?;
            let path = dir.join(format!("{name}_{k:03}.png"));
            fs::write(&path, img.encode_png()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
