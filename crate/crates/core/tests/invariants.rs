//! Cross-module invariants checked through the public API.

use std::collections::BTreeSet;

use proptest::prelude::*;

use usegmix::blend::{inpaint, make_blend_plan, paste, BlendConfig, Inpainter};
use usegmix::consensus::AnchorSegment;
use usegmix::features::{decode_feature_file, encode_feature_file, FeatureVector};
use usegmix::pipeline::{generate_dataset, load_corpus, phase1_index, ImageStore, Phase2Config};
use usegmix::pool::Phase1Config;
use usegmix::raster::{BitMask, ImageRgb};
use usegmix::sampler::{distribution_from_terms, sample_with_uniform};
use usegmix::segmenter::{FloodFillConfig, SegmenterBackend};
use usegmix::superpixel::SlicConfig;

fn rect(w: usize, h: usize, [x0, y0, rw, rh]: [usize; 4]) -> BitMask {
    BitMask::from_fn(w, h, |x, y| (x0..x0 + rw).contains(&x) && (y0..y0 + rh).contains(&y)).unwrap()
}

fn segment(mask: BitMask, id: &str) -> AnchorSegment {
    AnchorSegment { mask, source_image: id.into(), class_label: "c".into(), segment_id: id.into() }
}

fn noise(w: usize, h: usize, seed: u64) -> ImageRgb {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    ImageRgb::from_fn(w, h, |_, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        [s as u8, (s >> 8) as u8, (s >> 16) as u8]
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_file_round_trips_at_f32(
        recs in prop::collection::btree_map("[a-z0-9_./#]{1,24}", prop::collection::vec(-1e6f64..1e6, 3), 0..20)
    ) {
        let recs: Vec<(String, FeatureVector)> = recs.into_iter().map(|(id, v)| (id, FeatureVector(v))).collect();
        let back = decode_feature_file(&encode_feature_file(&recs).unwrap()).unwrap();
        let expect: Vec<_> = recs.iter().map(|(id, f)| (id.clone(), f.to_f32_precision())).collect();
        prop_assert_eq!(back, expect);
    }

    #[test]
    fn sampling_never_returns_an_excluded_entry(
        terms in prop::collection::vec((1.0f64..20.0, 0.0f64..50.0, any::<bool>()), 1..40),
        u in 0.0f64..1.0,
    ) {
        let ws: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let ds: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let mut excluded: Vec<bool> = terms.iter().map(|t| t.2).collect();
        excluded[0] = false;
        let dist = distribution_from_terms(&ws, &ds, &excluded).unwrap();
        let j = sample_with_uniform(&dist, u);
        prop_assert!(!excluded[j]);
        prop_assert!(dist.probs()[j] > 0.0);
    }

    #[test]
    fn blend_touches_only_the_inpaint_region_and_paste(
        t in (0usize..20, 0usize..20, 3usize..12, 3usize..12),
        r in (0usize..20, 0usize..20, 3usize..12, 3usize..12),
        seed in any::<u64>(),
        band in 1usize..4,
    ) {
        let (w, h) = (32, 32);
        let target = segment(rect(w, h, [t.0, t.1, t.2, t.3]), "t");
        let repl = segment(rect(w, h, [r.0, r.1, r.2, r.3]), "r");
        let img = noise(w, h, seed);
        let other = noise(w, h, seed ^ 1);
        let cfg = BlendConfig { band_width: band, ..Default::default() };
        let plan = make_blend_plan(&img, &target, &other, &repl, &cfg).unwrap();
        let composite = paste(&img, &plan).unwrap();
        let out = inpaint(&composite, &plan, &Inpainter::Builtin, &cfg).unwrap();
        let touched = plan.inpaint_mask.union(&plan.warped_replacement_mask).unwrap();
        for i in 0..w * h {
            if !plan.warped_replacement_mask.at(i) {
                prop_assert_eq!(composite.pixel(i), img.pixel(i));
            }
            if !touched.at(i) {
                prop_assert_eq!(out.pixel(i), img.pixel(i));
            }
        }
        prop_assert!(target.mask.difference(&plan.warped_replacement_mask).unwrap().difference(&plan.inpaint_mask).unwrap().is_empty());
    }
}

#[test]
fn per_image_weight_reset_makes_outputs_prefix_stable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    usegmix::toy::write_toy_corpus(&corpus_dir, 2, 64, 9).unwrap();
    let phase1 = Phase1Config { slic: SlicConfig { n_s: 12, ..Default::default() }, ..Default::default() };
    let backend = SegmenterBackend::FloodFill(FloodFillConfig::default());
    let pools = phase1_index(&corpus_dir, &dir.path().join("pools"), &phase1, &backend, 4, None).unwrap();
    let corpus = load_corpus(&corpus_dir).unwrap();

    let run = |count: usize, reset: bool, name: &str| {
        let cfg = Phase2Config { per_class_count: count, reset_weights_per_image: reset, master_seed: 6, ..Default::default() };
        let mut pools = pools.clone();
        let mut store = ImageStore::new(Some(corpus_dir.clone()));
        let report = generate_dataset(&corpus, &mut pools, &mut store, &cfg, &BlendConfig::default(), &Inpainter::Builtin, &dir.path().join(name))
            .unwrap();
        assert!(report.failures.is_empty());
        report.records
    };
    let short = run(2, true, "short");
    let long = run(5, true, "long");
    for rec in &short {
        let twin = long.iter().find(|r| r.output == rec.output).unwrap();
        assert_eq!(twin, rec);
        let a = std::fs::read(dir.path().join("short").join(&rec.output)).unwrap();
        let b = std::fs::read(dir.path().join("long").join(&rec.output)).unwrap();
        assert_eq!(a, b);
    }
    for rec in run(3, false, "kept") {
        assert!((0.30..=1.0).contains(&rec.ratio));
    }

    let ids: BTreeSet<&str> = long.iter().map(|r| r.source_image.as_str()).collect();
    assert_eq!(ids.len(), 6);
}
