use proptest::prelude::*;

use wnet_core::affinity::{build_affinity, AffinityParams};
use wnet_core::config::PipelineConfig;
use wnet_core::contour::regions::relabel_raster;
use wnet_core::contour::{build_ucm, connected_components, initial_regions, threshold_ucm, BoundaryMap};
use wnet_core::crf::{crf_argmax, mean_field_observed, read_q_dump, write_q_dump, CrfParams};
use wnet_core::io::{decode_label_map, decode_pnm, encode_label_map, encode_pnm};
use wnet_core::metrics::{
    evaluate, ods_ois, probabilistic_rand, segmentation_covering, threshold_grid,
    variation_of_information, EvalRecord, Scores,
};
use wnet_core::ncut::{hard_ncut, soft_ncut, SoftSegmentation};
use wnet_core::resample::resize_nearest;
use wnet_core::{ImageTensor, LabelMap};

fn image(max_side: usize, channels: usize) -> impl Strategy<Value = ImageTensor> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        prop::collection::vec(0u8..=255, h * w * channels).prop_map(move |v| {
            ImageTensor::new(h, w, channels, v.iter().map(|b| *b as f64 / 255.0).collect()).unwrap()
        })
    })
}

fn labels_of(h: usize, w: usize, k: u32) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0..k, h * w).prop_map(move |v| LabelMap::new(h, w, v).unwrap())
}

fn label_pair(max_side: usize, k: u32) -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| (labels_of(h, w, k), labels_of(h, w, k)))
}

fn soft_for(h: usize, w: usize, k: usize) -> impl Strategy<Value = SoftSegmentation> {
    prop::collection::vec(0.05f64..1.0, h * w * k).prop_map(move |mut v| {
        for px in v.chunks_mut(k) {
            let s: f64 = px.iter().sum();
            px.iter_mut().for_each(|x| *x /= s);
        }
        SoftSegmentation::new(h, w, k, v).unwrap()
    })
}

fn image_and_soft(max_side: usize, k: usize) -> impl Strategy<Value = (ImageTensor, SoftSegmentation)> {
    image(max_side, 3).prop_flat_map(move |img| {
        let (h, w) = (img.height(), img.width());
        (Just(img), soft_for(h, w, k))
    })
}

fn permute(l: &LabelMap, shift: u32, k: u32) -> LabelMap {
    LabelMap::new(l.height(), l.width(), l.labels().iter().map(|x| (x * 7 + shift) % (7 * k + 1)).collect())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affinity_symmetric_sparse_and_bounded(img in image(10, 3)) {
        let p = AffinityParams::default();
        let w = build_affinity(&img, &p).unwrap();
        let (h, wd) = (img.height(), img.width());
        for u in 0..h * wd {
            prop_assert_eq!(w.weight(u, u), 1.0);
            let mut total = 0.0;
            for (v, wt) in w.row(u) {
                prop_assert!((0.0..=1.0).contains(&wt));
                prop_assert_eq!(w.weight(v, u), wt);
                let (dy, dx) = ((u / wd) as f64 - (v / wd) as f64, (u % wd) as f64 - (v % wd) as f64);
                prop_assert!((dy * dy + dx * dx).sqrt() < p.radius);
                total += wt;
            }
            prop_assert!((total - w.degree()[u]).abs() <= 1e-12);
        }
    }

    #[test]
    fn soft_ncut_bounded_and_permutation_invariant((img, p) in image_and_soft(6, 3)) {
        let w = build_affinity(&img, &AffinityParams::default()).unwrap();
        let j = soft_ncut(&p, &w).unwrap();
        prop_assert!((-1e-12..=3.0 + 1e-12).contains(&j));
        // rotate class indices
        let k = p.k();
        let mut rot = p.probs().to_vec();
        for px in rot.chunks_mut(k) {
            px.rotate_left(1);
        }
        let q = SoftSegmentation::new(p.height(), p.width(), k, rot).unwrap();
        prop_assert!((soft_ncut(&q, &w).unwrap() - j).abs() < 1e-12);
    }

    #[test]
    fn one_hot_soft_matches_hard(img in image(6, 1), seed in any::<u64>()) {
        // an empty class scores 0 in the hard form but 1 in the soft form
        prop_assume!(img.height() * img.width() >= 3);
        let w = build_affinity(&img, &AffinityParams::default()).unwrap();
        let (h, wd) = (img.height(), img.width());
        let mut rng = wnet_core::Rng::new(seed);
        let mut i = 0;
        let labels = LabelMap::from_fn(h, wd, |_, _| {
            i += 1;
            if i <= 3 { i as u32 - 1 } else { rng.below(3) as u32 }
        });
        let p = SoftSegmentation::one_hot(&labels, 3, 1e-9).unwrap();
        let soft = soft_ncut(&p, &w).unwrap();
        let hard = hard_ncut(&labels, &w, 3).unwrap();
        prop_assert!((soft - hard).abs() < 1e-6, "soft {} hard {}", soft, hard);
    }

    #[test]
    fn crf_keeps_q_on_simplex((img, p) in image_and_soft(6, 3)) {
        let params = CrfParams { iterations: 5, ..CrfParams::default() };
        let mut worst = 0.0f64;
        let q = mean_field_observed(&p, &img, &params, |_, q| {
            for u in 0..q.pixel_count() {
                let px = q.pixel(u);
                let s: f64 = px.iter().sum();
                worst = worst.max((s - 1.0).abs());
                assert!(px.iter().all(|v| *v >= 0.0 && v.is_finite()));
            }
        })
        .unwrap();
        prop_assert!(worst <= 1e-6);
        let again = crf_argmax(&SoftSegmentation::one_hot(&crf_argmax(&q), 3, 1e-9).unwrap());
        prop_assert_eq!(again, crf_argmax(&q));
    }

    #[test]
    fn crf_zero_weights_is_identity((img, p) in image_and_soft(6, 4), iters in 1usize..6) {
        let params = CrfParams { iterations: iters, w_app: 0.0, w_smooth: 0.0, ..CrfParams::default() };
        let q = mean_field_observed(&p, &img, &params, |_, q| assert_eq!(q, &p)).unwrap();
        prop_assert_eq!(q, p);
    }

    #[test]
    fn q_dump_round_trips((_, p) in image_and_soft(5, 3)) {
        let mut buf = Vec::new();
        write_q_dump(&p, &mut buf).unwrap();
        prop_assert_eq!(read_q_dump(&buf[..]).unwrap(), p);
    }

    #[test]
    fn ucm_monotone_and_nested(
        labels in (2usize..=8, 2usize..=8).prop_flat_map(|(h, w)| labels_of(h, w, 5)),
        strengths in prop::collection::vec(0.0f64..=1.0, 64),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let regions = initial_regions(&labels, 1);
        let (h, w) = (regions.height(), regions.width());
        let b = BoundaryMap::new(h, w, strengths[..h * w].to_vec());
        let hier = build_ucm(&regions, &b).unwrap();
        prop_assert_eq!(hier.merges.len() + 1, regions.distinct_count());
        prop_assert!(hier.merges.windows(2).all(|m| m[0].strength <= m[1].strength));
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let fine = threshold_ucm(&hier, lo);
        let coarse = threshold_ucm(&hier, hi);
        // every fine region lies inside a single coarse region
        let mut owner = std::collections::BTreeMap::new();
        for (f, c) in fine.labels().iter().zip(coarse.labels()) {
            prop_assert_eq!(*owner.entry(*f).or_insert(*c), *c);
        }
        prop_assert_eq!(threshold_ucm(&hier, 1.0).distinct_count(), 1);
        let below = hier.merges.first().map_or(0.0, |m| m.strength) - 1e-9;
        if below >= 0.0 {
            prop_assert_eq!(threshold_ucm(&hier, below), relabel_raster(&regions));
        }
        prop_assert!(hier.ucm.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn components_match_flood_fill(labels in (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| labels_of(h, w, 3))) {
        let cc = connected_components(&labels);
        let (h, w) = (labels.height(), labels.width());
        // independent flood fill with an explicit stack
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for s in 0..h * w {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                prop_assert_eq!(cc.labels()[u], cc.labels()[s]);
                let (y, x) = (u / w, u % w);
                let mut nb = Vec::new();
                if y > 0 { nb.push(u - w); }
                if y + 1 < h { nb.push(u + w); }
                if x > 0 { nb.push(u - 1); }
                if x + 1 < w { nb.push(u + 1); }
                for v in nb {
                    if !seen[v] && labels.labels()[v] == labels.labels()[u] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        prop_assert_eq!(cc.distinct_count(), count);
    }

    #[test]
    fn metrics_bounded_and_permutation_invariant((s, g) in label_pair(8, 4), shift in 0u32..5) {
        let n = s.len() as f64;
        let sc = segmentation_covering(&s, std::slice::from_ref(&g)).unwrap();
        let pri = probabilistic_rand(&s, std::slice::from_ref(&g)).unwrap();
        let vi = variation_of_information(&s, std::slice::from_ref(&g)).unwrap();
        prop_assert!((0.0..=1.0).contains(&sc));
        prop_assert!((0.0..=1.0).contains(&pri));
        prop_assert!(vi >= 0.0 && vi <= 2.0 * n.ln() + 1e-12);
        let (ps, pg) = (permute(&s, shift, 4), permute(&g, shift + 1, 4));
        prop_assert!((segmentation_covering(&ps, std::slice::from_ref(&pg)).unwrap() - sc).abs() < 1e-12);
        prop_assert!((probabilistic_rand(&ps, std::slice::from_ref(&pg)).unwrap() - pri).abs() < 1e-12);
        prop_assert!((variation_of_information(&ps, &[pg]).unwrap() - vi).abs() < 1e-12);
        prop_assert!((variation_of_information(&g, std::slice::from_ref(&s)).unwrap() - vi).abs() < 1e-12);
        let same = evaluate(&s, std::slice::from_ref(&s)).unwrap();
        prop_assert_eq!(same, Scores { sc: 1.0, pri: 1.0, vi: 0.0 });
    }

    #[test]
    fn ois_dominates_ods(scores in prop::collection::vec(prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..3.0), 5), 1..6)) {
        let grid = threshold_grid(0.25).unwrap();
        let records: Vec<EvalRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| EvalRecord {
                id: format!("im{i}"),
                thresholds: grid.clone(),
                scores: s.iter().map(|&(sc, pri, vi)| Scores { sc, pri, vi }).collect(),
                gt_count: 1,
            })
            .collect();
        let sum = ods_ois(&records).unwrap();
        prop_assert!(sum.sc.ois >= sum.sc.ods - 1e-12);
        prop_assert!(sum.pri.ois >= sum.pri.ods - 1e-12);
        prop_assert!(sum.vi.ois <= sum.vi.ods + 1e-12);
        if records.len() == 1 {
            prop_assert_eq!(sum.sc.ods, sum.sc.ois);
        }
    }

    #[test]
    fn pnm_and_label_maps_round_trip(img in image(9, 3), gray in image(9, 1), l in (1usize..=9, 1usize..=9).prop_flat_map(|(h, w)| labels_of(h, w, 65535))) {
        prop_assert_eq!(decode_pnm(&encode_pnm(&img).unwrap()).unwrap(), img);
        prop_assert_eq!(decode_pnm(&encode_pnm(&gray).unwrap()).unwrap(), gray);
        prop_assert_eq!(decode_label_map(&encode_label_map(&l).unwrap()).unwrap(), l);
    }

    #[test]
    fn nearest_upsampling_by_integer_factor_round_trips(l in (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| labels_of(h, w, 4)), f in 1usize..4) {
        let up = resize_nearest(&l, l.height() * f, l.width() * f);
        prop_assert_eq!(resize_nearest(&up, l.height(), l.width()), l);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), k in 2usize..16, lr in 1e-5f64..1.0, noise in 0.0f64..0.2) {
        let mut c = PipelineConfig::default();
        c.set("seed", &seed.to_string()).unwrap();
        c.set("wnet.k", &k.to_string()).unwrap();
        c.set("train.lr", &lr.to_string()).unwrap();
        c.set("synth.noise", &noise.to_string()).unwrap();
        c.finish().unwrap();
        let back = PipelineConfig::parse_str(&c.to_text()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}
