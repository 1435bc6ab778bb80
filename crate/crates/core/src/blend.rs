//! Placing a replacement segment over a target segment and repairing the
//! seams.
//!
//! A [`BlendPlan`] records where a replacement lands and which pixels must
//! be regenerated (a band around the pasted boundary plus any part of the
//! old segment left uncovered). The builtin repair solves a discrete Poisson
//! equation over those pixels; an external inpainter can be used instead.

use serde::{Deserialize, Serialize};

use crate::consensus::{identity_vector, AnchorSegment};
use crate::error::{Error, Result};
use crate::raster::{dilate, erode, warp_affine, AffineTransform2D, BitMask, ImageRgb};
use crate::segmenter::SharedBackend;
use crate::superpixel::neighbors4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendMode {
    /// Zero guidance: a membrane interpolating the boundary.
    HarmonicFill,
    /// Guidance from composite gradients that do not cross a paste seam.
    SeamlessClone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InpaintRegion {
    /// Seam band plus uncovered holes.
    BandAndHoles,
    /// Everything touched by the replacement, plus the band.
    FullUnion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    pub band_width: usize,
    /// Relative residual at which the solver stops.
    pub solver_tol: f64,
    /// Defaults to 10 times the number of unknowns.
    pub solver_max_iters: Option<usize>,
    pub mode: BlendMode,
    pub inpaint_region: InpaintRegion,
    /// Passed to external inpainters; they apply their own default when unset.
    pub inpaint_steps: Option<u32>,
    /// Use the builtin solver when an external inpainter fails.
    pub fallback_to_builtin: bool,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            band_width: 3,
            solver_tol: 1e-8,
            solver_max_iters: None,
            mode: BlendMode::SeamlessClone,
            inpaint_region: InpaintRegion::BandAndHoles,
            inpaint_steps: None,
            fallback_to_builtin: false,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.band_width < 1 {
            return Err(Error::invalid("band_width must be at least 1"));
        }
        if !(self.solver_tol > 0.0 && self.solver_tol.is_finite()) {
            return Err(Error::invalid(format!("solver_tol must be positive, got {}", self.solver_tol)));
        }
        if self.solver_max_iters == Some(0) {
            return Err(Error::invalid("solver_max_iters must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendPlan {
    pub target_mask: BitMask,
    pub warped_replacement_mask: BitMask,
    /// Full-size warped replacement image; only meaningful under the mask.
    pub warped_replacement_pixels: ImageRgb,
    pub inpaint_mask: BitMask,
    pub transform: AffineTransform2D,
}

/// Scale-and-translate map taking `src` onto `dst`: the scale is the ratio
/// of square-root areas and the centroids line up.
pub fn fit_affine(src: &BitMask, dst: &BitMask) -> Result<AffineTransform2D> {
    let a = identity_vector(src)?;
    let b = identity_vector(dst)?;
    let s = b.scnt / a.scnt;
    Ok(AffineTransform2D::scale_translate(s, b.cx - s * a.cx, b.cy - s * a.cy))
}

/// Pixels to regenerate for a target/warped-replacement pair.
pub fn inpaint_region(target: &BitMask, warped: &BitMask, cfg: &BlendConfig) -> Result<BitMask> {
    let touched = target.union(warped)?;
    let grown = dilate(&touched, cfg.band_width);
    match cfg.inpaint_region {
        InpaintRegion::FullUnion => Ok(grown),
        InpaintRegion::BandAndHoles => {
            let band = grown.difference(&erode(warped, cfg.band_width))?;
            target.difference(warped)?.union(&band)
        }
    }
}

pub fn make_blend_plan(
    target_img: &ImageRgb,
    target: &AnchorSegment,
    repl_img: &ImageRgb,
    repl: &AnchorSegment,
    cfg: &BlendConfig,
) -> Result<BlendPlan> {
    cfg.validate()?;
    let (w, h) = target_img.dims();
    if target.mask.dims() != (w, h) {
        return Err(Error::DimensionMismatch { expected: (w, h), found: target.mask.dims() });
    }
    if repl.mask.dims() != repl_img.dims() {
        return Err(Error::DimensionMismatch { expected: repl_img.dims(), found: repl.mask.dims() });
    }
    let transform = fit_affine(&repl.mask, &target.mask)?;
    let warped = warp_affine(&repl.mask, &transform, w, h)?;
    if warped.is_empty() {
        return Err(Error::EmptyMask("warped replacement mask"));
    }
    let pixels = warp_affine(repl_img, &transform, w, h)?;
    let inpaint_mask = inpaint_region(&target.mask, &warped, cfg)?;
    Ok(BlendPlan {
        target_mask: target.mask.clone(),
        warped_replacement_mask: warped,
        warped_replacement_pixels: pixels,
        inpaint_mask,
        transform,
    })
}

/// Copies the warped replacement into `target_img` under its mask.
pub fn paste(target_img: &ImageRgb, plan: &BlendPlan) -> Result<ImageRgb> {
    let m = &plan.warped_replacement_mask;
    if m.dims() != target_img.dims() || plan.warped_replacement_pixels.dims() != target_img.dims() {
        return Err(Error::DimensionMismatch { expected: target_img.dims(), found: m.dims() });
    }
    let mut out = target_img.clone();
    for i in (0..m.width() * m.height()).filter(|&i| m.at(i)) {
        out.set_pixel(i, plan.warped_replacement_pixels.pixel(i));
    }
    Ok(out)
}

/// Per-pixel provenance of a composite, used to decide which gradients are
/// trusted as guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendLayers {
    pub inpaint_mask: BitMask,
    /// 0 for original pixels, `k` for the k-th paste, [`BlendLayers::HOLE`]
    /// for uncovered target pixels.
    pub source: Vec<u32>,
}

impl BlendLayers {
    pub const HOLE: u32 = u32::MAX;

    /// Layers for plans applied in order; later pastes win.
    pub fn from_plans<'a>(width: usize, height: usize, plans: impl IntoIterator<Item = &'a BlendPlan>) -> Result<Self> {
        let mut inpaint_mask = BitMask::new(width, height)?;
        let mut source = vec![0u32; width * height];
        for (k, plan) in plans.into_iter().enumerate() {
            inpaint_mask = inpaint_mask.union(&plan.inpaint_mask)?;
            for (i, s) in source.iter_mut().enumerate() {
                if plan.warped_replacement_mask.at(i) {
                    *s = k as u32 + 1;
                } else if plan.target_mask.at(i) {
                    *s = Self::HOLE;
                }
            }
        }
        Ok(Self { inpaint_mask, source })
    }
}

/// Result of one scalar solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSolution {
    /// Full raster: solved values under the mask, `known` elsewhere.
    pub values: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x|| / ||b||` of the assembled system at `values`.
    pub residual: f64,
}

const NONE: u32 = u32::MAX;

/// Solves the 5-point Poisson equation on the pixels of `mask`.
///
/// For each unknown p with in-image neighbors N(p):
/// `|N(p)| f_p - sum_{q in N(p), q unknown} f_q = sum_{q in N(p), q known} known_q + div_p`.
/// `div` defaults to zero (harmonic). A connected group of unknowns with no
/// known neighbor is pinned at its first pixel to `known` there.
pub fn solve_poisson_channel(
    mask: &BitMask,
    known: &[f64],
    div: Option<&[f64]>,
    tol: f64,
    max_iters: Option<usize>,
) -> Result<ChannelSolution> {
    let (w, h) = mask.dims();
    let n_px = w * h;
    if known.len() != n_px || div.is_some_and(|d| d.len() != n_px) {
        return Err(Error::invalid("known/div length does not match the mask"));
    }
    let mut unknown = mask.clone();
    pin_isolated_components(&mut unknown);

    let mut index = vec![NONE; n_px];
    let cells: Vec<usize> = (0..n_px).filter(|&i| unknown.at(i)).collect();
    for (k, &i) in cells.iter().enumerate() {
        index[i] = k as u32;
    }
    let n = cells.len();
    let mut values = known.to_vec();
    if n == 0 {
        return Ok(ChannelSolution { values, iterations: 0, residual: 0.0 });
    }

    // assemble: diagonal, unknown neighbors, right-hand side
    let mut diag = vec![0.0; n];
    let mut nbrs = vec![[NONE; 4]; n];
    let mut b = vec![0.0; n];
    for (k, &i) in cells.iter().enumerate() {
        b[k] = div.map_or(0.0, |d| d[i]);
        for (slot, q) in neighbors4(i, w, h).into_iter().enumerate() {
            let Some(q) = q else { continue };
            diag[k] += 1.0;
            if index[q] == NONE {
                b[k] += known[q];
            } else {
                nbrs[k][slot] = index[q];
            }
        }
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for k in 0..n {
            let mut acc = diag[k] * x[k];
            for &j in &nbrs[k] {
                if j != NONE {
                    acc -= x[j as usize];
                }
            }
            out[k] = acc;
        }
    };
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();

    let b_norm = dot(&b, &b).sqrt();
    let mut x: Vec<f64> = cells.iter().map(|&i| known[i]).collect();
    if b_norm == 0.0 {
        x.fill(0.0);
        for (k, &i) in cells.iter().enumerate() {
            values[i] = x[k];
        }
        return Ok(ChannelSolution { values, iterations: 0, residual: 0.0 });
    }
    let max_iters = max_iters.unwrap_or(10 * n).max(1);

    // Jacobi-preconditioned conjugate gradient
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    while dot(&r, &r).sqrt() / b_norm > tol {
        if iterations == max_iters {
            return Err(Error::SolverDiverged { residual: dot(&r, &r).sqrt() / b_norm, iterations });
        }
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        for k in 0..n {
            z[k] = r[k] / diag[k];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
        iterations += 1;
    }

    // report the true residual, not the recurrence
    apply(&x, &mut ax);
    let residual = b.iter().zip(&ax).map(|(bi, ai)| (bi - ai).powi(2)).sum::<f64>().sqrt() / b_norm;
    for (k, &i) in cells.iter().enumerate() {
        values[i] = x[k];
    }
    Ok(ChannelSolution { values, iterations, residual })
}

/// Clears the first pixel of every 4-connected component of `mask` that has
/// no unmasked in-image neighbor.
fn pin_isolated_components(mask: &mut BitMask) {
    let (w, h) = mask.dims();
    let mut seen = vec![false; w * h];
    for start in 0..w * h {
        if !mask.at(start) || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut anchored = false;
        while let Some(i) = stack.pop() {
            for q in neighbors4(i, w, h).into_iter().flatten() {
                if !mask.at(q) {
                    anchored = true;
                } else if !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        if !anchored {
            mask.set_at(start, false);
        }
    }
}

/// Guidance divergence per pixel for one channel: sum over in-image
/// neighbors of `g_p - g_q` when p and q share a source layer.
fn guidance_divergence(channel: &[f64], layers: &BlendLayers, w: usize, h: usize) -> Vec<f64> {
    let src = &layers.source;
    (0..w * h)
        .map(|i| {
            if !layers.inpaint_mask.at(i) || src[i] == BlendLayers::HOLE {
                return 0.0;
            }
            neighbors4(i, w, h)
                .into_iter()
                .flatten()
                .filter(|&q| src[q] == src[i])
                .map(|q| channel[i] - channel[q])
                .sum()
        })
        .collect()
}

/// Builtin repair over `layers.inpaint_mask`. Pixels outside the mask are
/// copied from `composite` unchanged.
pub fn poisson_blend_layers(composite: &ImageRgb, layers: &BlendLayers, cfg: &BlendConfig) -> Result<ImageRgb> {
    cfg.validate()?;
    let (w, h) = composite.dims();
    if layers.inpaint_mask.dims() != (w, h) || layers.source.len() != w * h {
        return Err(Error::DimensionMismatch { expected: (w, h), found: layers.inpaint_mask.dims() });
    }
    let solve = |c: usize| {
        let known = composite.channel(c);
        let div = match cfg.mode {
            BlendMode::HarmonicFill => None,
            BlendMode::SeamlessClone => Some(guidance_divergence(&known, layers, w, h)),
        };
        solve_poisson_channel(&layers.inpaint_mask, &known, div.as_deref(), cfg.solver_tol, cfg.solver_max_iters)
    };
    let solved: Vec<Result<ChannelSolution>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3).map(|c| s.spawn(move || solve(c))).collect();
        handles.into_iter().map(|h| h.join().expect("solver thread panicked")).collect()
    });
    let solved = solved.into_iter().collect::<Result<Vec<_>>>()?;

    let mut out = composite.clone();
    for i in (0..w * h).filter(|&i| layers.inpaint_mask.at(i)) {
        let px = std::array::from_fn(|c| solved[c].values[i].clamp(0.0, 255.0).round() as u8);
        out.set_pixel(i, px);
    }
    Ok(out)
}

pub fn poisson_blend(composite: &ImageRgb, plan: &BlendPlan, cfg: &BlendConfig) -> Result<ImageRgb> {
    let (w, h) = composite.dims();
    poisson_blend_layers(composite, &BlendLayers::from_plans(w, h, [plan])?, cfg)
}

/// `overlay` where `mask` is set, `base` elsewhere.
pub fn masked_merge(base: &ImageRgb, overlay: &ImageRgb, mask: &BitMask) -> Result<ImageRgb> {
    if overlay.dims() != base.dims() || mask.dims() != base.dims() {
        return Err(Error::DimensionMismatch { expected: base.dims(), found: overlay.dims() });
    }
    let mut out = base.clone();
    for i in (0..base.area()).filter(|&i| mask.at(i)) {
        out.set_pixel(i, overlay.pixel(i));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum Inpainter {
    Builtin,
    External(SharedBackend),
}

pub fn inpaint_layers(
    composite: &ImageRgb,
    layers: &BlendLayers,
    inpainter: &Inpainter,
    cfg: &BlendConfig,
) -> Result<ImageRgb> {
    match inpainter {
        Inpainter::Builtin => poisson_blend_layers(composite, layers, cfg),
        Inpainter::External(handle) => {
            let reply = {
                let mut h = handle.lock().unwrap_or_else(|e| e.into_inner());
                h.request_inpaint(composite, &layers.inpaint_mask, cfg.inpaint_steps)
            };
            match reply {
                Ok(img) => masked_merge(composite, &img, &layers.inpaint_mask),
                Err(e) if cfg.fallback_to_builtin => {
                    log::warn!("external inpainter failed ({e}), using the builtin solver");
                    poisson_blend_layers(composite, layers, cfg)
                }
                Err(e) => Err(e),
            }
        }
    }
}

pub fn inpaint(composite: &ImageRgb, plan: &BlendPlan, inpainter: &Inpainter, cfg: &BlendConfig) -> Result<ImageRgb> {
    let (w, h) = composite.dims();
    inpaint_layers(composite, &BlendLayers::from_plans(w, h, [plan])?, inpainter, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::mask_iou;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BitMask {
        BitMask::from_fn(w, h, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y)).unwrap()
    }

    fn anchor(mask: BitMask) -> AnchorSegment {
        AnchorSegment { mask, source_image: "c/x.png".into(), class_label: "c".into(), segment_id: "x#s000".into() }
    }

    fn harmonic() -> BlendConfig {
        BlendConfig { mode: BlendMode::HarmonicFill, ..Default::default() }
    }

    #[test]
    fn fit_affine_examples() {
        let m = rect(40, 40, 5, 6, 14, 20);
        let t = fit_affine(&m, &m).unwrap();
        assert!((t.a - 1.0).abs() < 1e-12 && (t.e - 1.0).abs() < 1e-12);
        assert!(t.c.abs() < 1e-12 && t.f.abs() < 1e-12);

        let moved = rect(40, 40, 10, 4, 19, 18);
        let t = fit_affine(&m, &moved).unwrap();
        assert!((t.a - 1.0).abs() < 1e-12);
        assert!((t.c - 5.0).abs() < 1e-12 && (t.f + 2.0).abs() < 1e-12);

        let small = rect(40, 40, 15, 15, 24, 24);
        let big = rect(40, 40, 10, 10, 29, 29);
        let t = fit_affine(&small, &big).unwrap();
        assert!((t.a - 2.0).abs() < 1e-12 && (t.e - 2.0).abs() < 1e-12);
        let warped = warp_affine(&small, &t, 40, 40).unwrap();
        assert!(mask_iou(&warped, &big).unwrap() >= 0.8);

        assert!(fit_affine(&BitMask::new(4, 4).unwrap(), &m).is_err());
    }

    #[test]
    fn identical_masks_give_boundary_ring() {
        let img = ImageRgb::filled(20, 20, [10, 20, 30]).unwrap();
        let m = rect(20, 20, 5, 5, 14, 14);
        let cfg = BlendConfig { band_width: 1, ..Default::default() };
        let plan = make_blend_plan(&img, &anchor(m.clone()), &img, &anchor(m.clone()), &cfg).unwrap();
        assert_eq!(plan.warped_replacement_mask, m);
        let ring = BitMask::from_fn(20, 20, |x, y| {
            let inside = |a: usize| (4..=15).contains(&a);
            let core = |a: usize| (6..=13).contains(&a);
            inside(x) && inside(y) && !(core(x) && core(y))
        })
        .unwrap();
        assert_eq!(plan.inpaint_mask, ring);
    }

    #[test]
    fn holes_are_inpainted() {
        let target = rect(30, 30, 5, 5, 24, 24);
        let warped = rect(30, 30, 12, 12, 17, 17);
        let cfg = BlendConfig { band_width: 1, ..Default::default() };
        let inpaint = inpaint_region(&target, &warped, &cfg).unwrap();
        let holes = target.difference(&warped).unwrap();
        assert!(holes.iter_set().all(|(x, y)| inpaint.get(x, y)));
        assert!(!inpaint.get(15, 15));
    }

    fn brute_force_inpaint(t: &BitMask, wm: &BitMask, bw: usize) -> BitMask {
        let (w, h) = t.dims();
        let near = |m: &BitMask, x: usize, y: usize, want: bool| {
            let r = bw as isize;
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    // outside the image counts as set: no seam at the frame
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        return false;
                    }
                    m.get(nx as usize, ny as usize) == want
                })
            })
        };
        BitMask::from_fn(w, h, |x, y| {
            let hole = t.get(x, y) && !wm.get(x, y);
            let dil = near(t, x, y, true) || near(wm, x, y, true);
            let interior = !near(wm, x, y, false);
            hole || (dil && !interior)
        })
        .unwrap()
    }

    #[test]
    fn random_rectangles_match_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(8..30), rng.random_range(8..30));
            let mut r = || {
                let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
                rect(w, h, x0, y0, rng.random_range(x0..w), rng.random_range(y0..h))
            };
            let (t, wm) = (r(), r());
            let bw = rng.random_range(1..4);
            let cfg = BlendConfig { band_width: bw, ..Default::default() };
            let got = inpaint_region(&t, &wm, &cfg).unwrap();
            assert_eq!(got, brute_force_inpaint(&t, &wm, bw));
            assert!(got.intersection(&erode(&wm, bw)).unwrap().is_empty());
        }
    }

    #[test]
    fn full_union_region() {
        let t = rect(20, 20, 2, 2, 8, 8);
        let wm = rect(20, 20, 4, 4, 12, 12);
        let cfg = BlendConfig { inpaint_region: InpaintRegion::FullUnion, band_width: 2, ..Default::default() };
        let got = inpaint_region(&t, &wm, &cfg).unwrap();
        assert!(t.union(&wm).unwrap().iter_set().all(|(x, y)| got.get(x, y)));
        assert_eq!(got, dilate(&t.union(&wm).unwrap(), 2));
    }

    #[test]
    fn plan_rejects_mismatched_mask() {
        let img = ImageRgb::filled(10, 10, [0; 3]).unwrap();
        let bad = anchor(BitMask::full(9, 10).unwrap());
        let good = anchor(BitMask::full(10, 10).unwrap());
        assert!(make_blend_plan(&img, &bad, &img, &good, &BlendConfig::default()).is_err());
        assert!(make_blend_plan(&img, &good, &img, &bad, &BlendConfig::default()).is_err());
    }

    fn plan_with(target: &ImageRgb, repl_pixels: ImageRgb, warped: BitMask) -> BlendPlan {
        let (w, h) = target.dims();
        BlendPlan {
            target_mask: BitMask::new(w, h).unwrap(),
            inpaint_mask: BitMask::new(w, h).unwrap(),
            warped_replacement_mask: warped,
            warped_replacement_pixels: repl_pixels,
            transform: AffineTransform2D::IDENTITY,
        }
    }

    #[test]
    fn paste_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut noise = |_: usize, _: usize| [rng.random(), rng.random(), rng.random()];
        let a = ImageRgb::from_fn(12, 9, &mut noise).unwrap();
        let b = ImageRgb::from_fn(12, 9, &mut noise).unwrap();
        assert_eq!(paste(&a, &plan_with(&a, b.clone(), BitMask::new(12, 9).unwrap())).unwrap(), a);
        assert_eq!(paste(&a, &plan_with(&a, b.clone(), BitMask::full(12, 9).unwrap())).unwrap(), b);
        let m = BitMask::from_fn(12, 9, |x, y| (x * 7 + y * 3) % 5 < 2).unwrap();
        let out = paste(&a, &plan_with(&a, b.clone(), m.clone())).unwrap();
        for y in 0..9 {
            for x in 0..12 {
                assert_eq!(out.get(x, y), if m.get(x, y) { b.get(x, y) } else { a.get(x, y) });
            }
        }
    }

    #[test]
    fn harmonic_constant_boundary() {
        let img = ImageRgb::filled(16, 16, [77, 0, 255]).unwrap();
        let mut noisy = img.clone();
        let m = rect(16, 16, 4, 4, 11, 11);
        for (x, y) in m.iter_set() {
            noisy.set(x, y, [(x * 13) as u8, (y * 29) as u8, 3]);
        }
        let layers = BlendLayers { inpaint_mask: m, source: vec![0; 256] };
        assert_eq!(poisson_blend_layers(&noisy, &layers, &harmonic()).unwrap(), img);
    }

    #[test]
    fn single_pixel_stencil_average() {
        let mut known = vec![0.0; 9];
        known[1] = 10.0;
        known[3] = 20.0;
        known[5] = 30.0;
        known[7] = 40.0;
        let m = BitMask::from_pixels(3, 3, &[(1, 1)]).unwrap();
        let sol = solve_poisson_channel(&m, &known, None, 1e-12, None).unwrap();
        assert!((sol.values[4] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        let (w, h) = (40, 40);
        let ramp: Vec<f64> = (0..w * h).map(|i| 2.0 * (i % w) as f64 + 3.0 * (i / w) as f64).collect();
        let m = rect(w, h, 4, 4, 35, 35);
        let mut start = ramp.clone();
        for i in (0..w * h).filter(|&i| m.at(i)) {
            start[i] = 0.0;
        }
        let sol = solve_poisson_channel(&m, &start, None, 1e-10, None).unwrap();
        let err = (0..w * h).map(|i| (sol.values[i] - ramp[i]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");

        // through the u8 path at default settings the integer ramp comes back exactly
        let img = ImageRgb::from_fn(w, h, |x, y| {
            let v = (2 * x + 3 * y) as u8;
            [v, 255 - v, 100]
        })
        .unwrap();
        let mut broken = img.clone();
        for (x, y) in m.iter_set() {
            broken.set(x, y, [0, 255, 0]);
        }
        let layers = BlendLayers { inpaint_mask: m, source: vec![0; w * h] };
        assert_eq!(poisson_blend_layers(&broken, &layers, &harmonic()).unwrap(), img);
    }

    /// Dense assembly straight from the stencil definition, solved by LU.
    fn dense_oracle(mask: &BitMask, known: &[f64], div: &[f64]) -> Vec<f64> {
        let (w, h) = mask.dims();
        let cells: Vec<(usize, usize)> = mask.iter_set().collect();
        let pos = |x: usize, y: usize| cells.iter().position(|&c| c == (x, y));
        let n = cells.len();
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for (k, &(x, y)) in cells.iter().enumerate() {
            b[k] = div[y * w + x];
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                a[(k, k)] += 1.0;
                match pos(nx, ny) {
                    Some(j) => a[(k, j)] -= 1.0,
                    None => b[k] += known[ny * w + nx],
                }
            }
        }
        let x = a.lu().solve(&b).expect("nonsingular");
        let mut out = known.to_vec();
        for (k, &(x0, y0)) in cells.iter().enumerate() {
            out[y0 * w + x0] = x[k];
        }
        out
    }

    #[test]
    fn matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (w, h) = (16, 16);
            // random region inside a 12x12 window, never touching the border
            let m = BitMask::from_fn(w, h, |x, y| (2..14).contains(&x) && (2..14).contains(&y) && rng.random_bool(0.7))
                .unwrap();
            let known: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
            let div: Vec<f64> = (0..w * h).map(|_| rng.random_range(-20.0..20.0)).collect();
            let sol = solve_poisson_channel(&m, &known, Some(&div), 1e-10, None).unwrap();
            let oracle = dense_oracle(&m, &known, &div);
            for i in 0..w * h {
                assert!((sol.values[i] - oracle[i]).abs() < 1e-6);
            }
            assert!(sol.residual <= 1e-10);
        }
    }

    #[test]
    fn border_pixels_use_available_neighbors() {
        let (w, h) = (10, 10);
        let known: Vec<f64> = (0..w * h).map(|i| (i % 7) as f64 * 10.0).collect();
        let m = rect(w, h, 0, 0, 3, 9);
        let sol = solve_poisson_channel(&m, &known, None, 1e-10, None).unwrap();
        let oracle = dense_oracle(&m, &known, &vec![0.0; w * h]);
        for i in 0..w * h {
            assert!((sol.values[i] - oracle[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn unanchored_region_is_pinned() {
        let known: Vec<f64> = (0..36).map(|i| i as f64).collect();
        let m = BitMask::full(6, 6).unwrap();
        let sol = solve_poisson_channel(&m, &known, None, 1e-10, None).unwrap();
        // harmonic with a single pinned value is constant
        assert!(sol.values.iter().all(|v| (v - 0.0).abs() < 1e-6));
    }

    #[test]
    fn non_convergence_reports_residual() {
        let known: Vec<f64> = (0..400).map(|i| (i * 37 % 255) as f64).collect();
        let m = rect(20, 20, 2, 2, 17, 17);
        match solve_poisson_channel(&m, &known, None, 1e-12, Some(2)) {
            Err(Error::SolverDiverged { residual, iterations }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seamless_clone_keeps_pasted_texture() {
        // a striped paste over a flat background: the band straddles the
        // seam, inside it the stripes' gradients are preserved
        let (w, h) = (30, 30);
        let bg = ImageRgb::filled(w, h, [100, 100, 100]).unwrap();
        let stripes = ImageRgb::from_fn(w, h, |x, _| if x % 2 == 0 { [150; 3] } else { [170; 3] }).unwrap();
        let warped = rect(w, h, 8, 8, 21, 21);
        let mut plan = plan_with(&bg, stripes, warped.clone());
        plan.target_mask = warped.clone();
        plan.inpaint_mask = inpaint_region(&warped, &warped, &BlendConfig::default()).unwrap();
        let composite = paste(&bg, &plan).unwrap();
        let out = poisson_blend(&composite, &plan, &BlendConfig::default()).unwrap();
        // stripe contrast survives inside the inner band
        let d = i32::from(out.get(10, 15)[0]) - i32::from(out.get(11, 15)[0]);
        assert!(d.abs() >= 15, "{d}");
        // and the seam step is smoothed
        let seam = i32::from(out.get(8, 15)[0]) - i32::from(out.get(7, 15)[0]);
        assert!(seam.abs() < 50, "{seam}");

        let flat = poisson_blend(&composite, &plan, &harmonic()).unwrap();
        let d = i32::from(flat.get(10, 15)[0]) - i32::from(flat.get(11, 15)[0]);
        assert!(d.abs() < 15, "{d}");
    }

    #[test]
    fn layers_track_provenance() {
        let (w, h) = (10, 10);
        let img = ImageRgb::filled(w, h, [0; 3]).unwrap();
        let mut p1 = plan_with(&img, img.clone(), rect(w, h, 0, 0, 3, 3));
        p1.target_mask = rect(w, h, 0, 0, 4, 4);
        let mut p2 = plan_with(&img, img.clone(), rect(w, h, 3, 3, 6, 6));
        p2.target_mask = rect(w, h, 3, 3, 6, 6);
        let layers = BlendLayers::from_plans(w, h, [&p1, &p2]).unwrap();
        assert_eq!(layers.source[0], 1);
        assert_eq!(layers.source[4], BlendLayers::HOLE);
        assert_eq!(layers.source[3 * w + 3], 2);
        assert_eq!(layers.source[9 * w + 9], 0);
    }

    proptest! {
        #[test]
        fn outside_mask_untouched_and_max_principle(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (rng.random_range(4..24), rng.random_range(4..24));
            let composite = ImageRgb::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
            let mask = BitMask::from_fn(w, h, |_, _| rng.random_bool(0.4)).unwrap();
            let layers = BlendLayers { inpaint_mask: mask.clone(), source: vec![0; w * h] };
            let out = poisson_blend_layers(&composite, &layers, &harmonic()).unwrap();
            for i in 0..w * h {
                if !mask.at(i) {
                    prop_assert_eq!(out.pixel(i), composite.pixel(i));
                }
            }
            // max principle over the known values feeding each channel
            for c in 0..3 {
                let boundary: Vec<u8> = (0..w * h)
                    .filter(|&i| !mask.at(i))
                    .map(|i| composite.pixel(i)[c])
                    .collect();
                if boundary.is_empty() {
                    continue;
                }
                let (lo, hi) = (*boundary.iter().min().unwrap(), *boundary.iter().max().unwrap());
                for i in (0..w * h).filter(|&i| mask.at(i)) {
                    prop_assert!((lo..=hi).contains(&out.pixel(i)[c]));
                }
            }
        }

        #[test]
        fn residual_within_tolerance(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (rng.random_range(3..20), rng.random_range(3..20));
            let mask = BitMask::from_fn(w, h, |_, _| rng.random_bool(0.5)).unwrap();
            let known: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
            let div: Vec<f64> = (0..w * h).map(|_| rng.random_range(-50.0..50.0)).collect();
            let sol = solve_poisson_channel(&mask, &known, Some(&div), 1e-8, None).unwrap();
            prop_assert!(sol.residual <= 1e-8);
        }
    }
}
