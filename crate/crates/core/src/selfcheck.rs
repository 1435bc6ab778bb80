//! Quick built-in sanity checks, runnable from an installed binary.

use std::collections::BTreeSet;

use crate::blend::{solve_poisson_channel, BlendConfig, Inpainter};
use crate::consensus::{cluster_masks, select_anchor, ConsensusConfig};
use crate::features::{decode_feature_file, encode_feature_file, pca_fit, FeatureVector};
use crate::pipeline::{indexed_targets, phase2_augment, ImageStore, Phase2Config};
use crate::pool::{build_pool, CorpusImage, Phase1Config};
use crate::raster::{BitMask, ImageRgb, Point};
use crate::sampler::distribution_from_terms;
use crate::segmenter::{floodfill_segment, Connectivity, FloodFillConfig, SegmenterBackend};
use crate::superpixel::{slic, SlicConfig};
use crate::toy::{toy_image, TOY_CLASSES};

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn two_entry_distribution() -> Result<(), String> {
    let d = distribution_from_terms(&[1.0, 1.0], &[0.0, 2f64.ln()], &[false, false]).map_err(|e| e.to_string())?;
    let p = d.probs();
    ensure((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12, || format!("got {p:?}"))
}

fn penalty_monotone() -> Result<(), String> {
    let ds = [0.5, 1.0, 3.0, 7.0];
    let mut ws = [1.0, 2.0, 1.0, 4.0];
    for j in 0..ds.len() {
        let before = distribution_from_terms(&ws, &ds, &[false; 4]).map_err(|e| e.to_string())?;
        ws[j] += 1.0;
        let after = distribution_from_terms(&ws, &ds, &[false; 4]).map_err(|e| e.to_string())?;
        ensure(after.probs()[j] < before.probs()[j], || format!("p_{j} did not decrease"))?;
    }
    Ok(())
}

fn poisson_stencil() -> Result<(), String> {
    let known = [0.0, 10.0, 0.0, 20.0, 0.0, 30.0, 0.0, 40.0, 0.0];
    let m = BitMask::from_pixels(3, 3, &[(1, 1)]).map_err(|e| e.to_string())?;
    let sol = solve_poisson_channel(&m, &known, None, 1e-12, None).map_err(|e| e.to_string())?;
    ensure((sol.values[4] - 25.0).abs() < 1e-9, || format!("center {}", sol.values[4]))
}

fn poisson_ramp() -> Result<(), String> {
    let (w, h) = (36, 36);
    let ramp: Vec<f64> = (0..w * h).map(|i| 2.0 * (i % w) as f64 + 3.0 * (i / w) as f64).collect();
    let m = BitMask::from_fn(w, h, |x, y| (2..34).contains(&x) && (2..34).contains(&y)).map_err(|e| e.to_string())?;
    let start: Vec<f64> = (0..w * h).map(|i| if m.at(i) { 0.0 } else { ramp[i] }).collect();
    let sol = solve_poisson_channel(&m, &start, None, 1e-10, None).map_err(|e| e.to_string())?;
    let err = (0..w * h).map(|i| (sol.values[i] - ramp[i]).abs()).fold(0.0, f64::max);
    ensure(err < 1e-6, || format!("max error {err:e}"))
}

fn floodfill_halves() -> Result<(), String> {
    let img = ImageRgb::from_fn(8, 6, |x, _| if x < 4 { [0; 3] } else { [255; 3] }).map_err(|e| e.to_string())?;
    let cfg = FloodFillConfig { color_tol: 254, connectivity: Connectivity::Four, max_frac: 1.0 };
    let m = floodfill_segment(&img, Point::new(6.5, 2.5), &cfg).map_err(|e| e.to_string())?;
    ensure(m.count() == 24 && m.iter_set().all(|(x, _)| x >= 4), || format!("{} pixels", m.count()))
}

fn slic_regions() -> Result<(), String> {
    let img = toy_image(0, 96, 96, 3).map_err(|e| e.to_string())?;
    let sp = slic(&img, &SlicConfig::default(), 0).map_err(|e| e.to_string())?;
    ensure(sp.labels().iter().all(|&l| (l as usize) < sp.n_regions()), || "unlabeled pixel".into())?;
    for (label, pixels) in sp.regions().iter().enumerate() {
        let m = BitMask::from_fn(96, 96, |x, y| sp.label_at(x, y) as usize == label).map_err(|e| e.to_string())?;
        let cfg = FloodFillConfig { color_tol: 0, connectivity: Connectivity::Four, max_frac: 1.0 };
        let (x, y) = (pixels[0] % 96, pixels[0] / 96);
        // a 0/255 rendering of the region flood-filled from one of its pixels
        let render = ImageRgb::from_fn(96, 96, |x, y| if m.get(x, y) { [255; 3] } else { [0; 3] })
            .map_err(|e| e.to_string())?;
        let reached = floodfill_segment(&render, Point::new(x as f64, y as f64), &cfg).map_err(|e| e.to_string())?;
        ensure(reached == m, || format!("region {label} is not 4-connected"))?;
    }
    Ok(())
}

fn pca_line() -> Result<(), String> {
    let pts: Vec<FeatureVector> = (-3..=3).map(|t| FeatureVector(vec![t as f64, 2.0 * t as f64])).collect();
    let model = pca_fit(&pts, 1).map_err(|e| e.to_string())?;
    let c = &model.components[0];
    let s5 = 5f64.sqrt();
    ensure((c[0] - 1.0 / s5).abs() < 1e-8 && (c[1] - 2.0 / s5).abs() < 1e-8, || format!("component {c:?}"))
}

fn feature_file_round_trip() -> Result<(), String> {
    let recs = vec![
        ("a#s000".to_owned(), FeatureVector(vec![0.5, -1.25, 3.0])),
        ("b#s001".to_owned(), FeatureVector(vec![1e-3, 2.0, -0.0])),
    ];
    let bytes = encode_feature_file(&recs).map_err(|e| e.to_string())?;
    let back = decode_feature_file(&bytes).map_err(|e| e.to_string())?;
    let expect: Vec<_> = recs.iter().map(|(id, f)| (id.clone(), f.to_f32_precision())).collect();
    ensure(back == expect, || "records changed".into())
}

fn consensus_identical() -> Result<(), String> {
    let m = BitMask::from_fn(20, 20, |x, y| x > 4 && y < 12).map_err(|e| e.to_string())?;
    let masks = vec![m.clone(); 15];
    let cfg = ConsensusConfig::default();
    let clusters = cluster_masks(&masks, &cfg).map_err(|e| e.to_string())?;
    ensure(clusters.len() == 1, || format!("{} clusters", clusters.len()))?;
    let anchor = select_anchor(&masks, &clusters[0], &cfg).map_err(|e| e.to_string())?;
    ensure(anchor == m, || "anchor differs".into())
}

fn mini_pipeline() -> Result<(), String> {
    let corpus: Vec<CorpusImage> = (0..2)
        .map(|k| CorpusImage {
            id: format!("{}/{k}.png", TOY_CLASSES[2]),
            class_label: TOY_CLASSES[2].into(),
            image: toy_image(2, 48, 48, 40 + k).expect("valid class"),
        })
        .collect();
    let phase1 = Phase1Config {
        slic: SlicConfig { n_s: 8, ..Default::default() },
        consensus: ConsensusConfig { k: 5, ..Default::default() },
        pca_dim: 4,
        ..Default::default()
    };
    let backend = SegmenterBackend::FloodFill(FloodFillConfig::default());
    let mut pools = build_pool(&corpus, &phase1, &backend, 1, None).map_err(|e| e.to_string())?;
    let pool = pools.get_mut(TOY_CLASSES[2]).ok_or("missing pool")?;
    let mut store = ImageStore::new(None);
    for c in &corpus {
        store.insert(c.id.clone(), c.image.clone());
    }
    let targets = indexed_targets(pool, &corpus[0].id);
    let aug = phase2_augment(
        &corpus[0].image,
        &targets,
        pool,
        &mut store,
        &Phase2Config::default(),
        &BlendConfig::default(),
        &Inpainter::Builtin,
        5,
    )
    .map_err(|e| e.to_string())?;
    ensure(aug.ratio >= 0.30, || format!("ratio {}", aug.ratio))?;
    let changed: BTreeSet<usize> = (0..48 * 48).filter(|&i| aug.image.pixel(i) != corpus[0].image.pixel(i)).collect();
    ensure(changed.iter().all(|&i| aug.union.at(i)), || "pixels changed outside the blend union".into())
}

pub const CHECKS: &[(&str, Check)] = &[
    ("two-entry-distribution", two_entry_distribution),
    ("penalty-monotone", penalty_monotone),
    ("poisson-stencil", poisson_stencil),
    ("poisson-ramp", poisson_ramp),
    ("floodfill-halves", floodfill_halves),
    ("slic-regions", slic_regions),
    ("pca-line", pca_line),
    ("feature-file-round-trip", feature_file_round_trip),
    ("consensus-identical", consensus_identical),
    ("mini-pipeline", mini_pipeline),
];

/// Runs every check and returns `(name, outcome)` pairs in order.
pub fn run_all() -> Vec<(&'static str, Result<(), String>)> {
    CHECKS.iter().map(|(name, f)| (*name, f())).collect()
}
