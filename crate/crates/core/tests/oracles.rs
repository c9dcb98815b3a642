mod common;

use hsic_core::classify::{
    asscc_classify, classify_image, estimate_centers, extract_feature_map, scc_classify, spatial_feature,
    ClassifierMode, ScaleSet,
};
use hsic_core::data::{synth_cube, Role};
use hsic_core::nncore::{init_network, Mode};
use hsic_core::train::{split_train_test, SampleSet};
use ndarray::{Array2, Axis};

fn small_setup() -> (
    hsic_core::Network,
    hsic_core::HyperCube,
    hsic_core::GroundTruth,
    hsic_core::SplitMask,
) {
    let mut net = init_network(&[5, 12, 7, 4, 3], 3).unwrap();
    // larger weights so features are not all near zero
    for i in 0..net.layers().len() {
        net.layer_mut(i).weights.mapv_inplace(|w| w * 60.0);
    }
    let (cube, gt) = synth_cube(3, 9, 11, 5, 3.0, 4).unwrap();
    let mask = split_train_test(&gt, 10, 4).unwrap();
    (net, cube, gt, mask)
}

#[test]
fn feature_map_matches_per_pixel_forward() {
    let (net, cube, _, _) = small_setup();
    let fm = extract_feature_map(&net, &cube).unwrap();
    assert_eq!((fm.height(), fm.width(), fm.dim()), (9, 11, 4));
    for p in 0..cube.num_pixels() {
        let x = Array2::from_shape_vec((1, 5), cube.spectrum(p).to_vec()).unwrap();
        let trace = net.forward(x.view(), Mode::Infer).unwrap();
        for (a, b) in fm.feature_at(p).iter().zip(trace.features().row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn estimated_centers_are_class_means_of_features() {
    let (net, cube, gt, mask) = small_setup();
    let train = SampleSet::from_mask(&cube, &gt, &mask, Role::Train).unwrap();
    let centers = estimate_centers(&net, &train).unwrap();
    for k in 1..=3 {
        let mut sum = vec![0.0; 4];
        let mut n = 0.0;
        for p in 0..cube.num_pixels() {
            if mask.roles()[p] == Role::Train && gt.labels()[p] as usize == k {
                let x = Array2::from_shape_vec((1, 5), cube.spectrum(p).to_vec()).unwrap();
                let f = net.features(x.view()).unwrap();
                sum.iter_mut().zip(f.row(0)).for_each(|(s, v)| *s += v);
                n += 1.0;
            }
        }
        assert_eq!(n, 10.0);
        for (a, s) in centers.center(k).iter().zip(&sum) {
            assert!((a - s / n).abs() < 1e-12);
        }
    }
}

#[test]
fn scc_matches_exhaustive_scan() {
    let (net, cube, gt, mask) = small_setup();
    let train = SampleSet::from_mask(&cube, &gt, &mask, Role::Train).unwrap();
    let centers = estimate_centers(&net, &train).unwrap();
    let fm = extract_feature_map(&net, &cube).unwrap();
    for p in 0..fm.num_pixels() {
        let f = fm.feature_at(p);
        let dists: Vec<f64> = (1..=3)
            .map(|k| f.iter().zip(centers.center(k)).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let want = dists.iter().position(|&d| d == best).unwrap() + 1;
        assert_eq!(scc_classify(f, &centers), want);
    }
}

#[test]
fn classify_image_agrees_pointwise() {
    let (net, cube, gt, mask) = small_setup();
    let train = SampleSet::from_mask(&cube, &gt, &mask, Role::Train).unwrap();
    let centers = estimate_centers(&net, &train).unwrap();
    let fm = extract_feature_map(&net, &cube).unwrap();
    let scales = ScaleSet::default();
    let scc = classify_image(&fm, &mask, &centers, &ClassifierMode::Scc).unwrap();
    let sscc = classify_image(&fm, &mask, &centers, &ClassifierMode::Sscc(5)).unwrap();
    let asscc = classify_image(&fm, &mask, &centers, &ClassifierMode::Asscc(scales.clone())).unwrap();
    assert!(scc.votes.is_empty() && sscc.votes.is_empty());
    let mut with_votes = asscc.votes.iter();
    for p in 0..fm.num_pixels() {
        let (r, c) = (p / fm.width(), p % fm.width());
        if mask.roles()[p] != Role::Test {
            assert_eq!(scc.map.label(r, c), 0);
            assert_eq!(sscc.map.label(r, c), 0);
            assert_eq!(asscc.map.label(r, c), 0);
            continue;
        }
        assert_eq!(scc.map.label(r, c) as usize, scc_classify(fm.feature_at(p), &centers));
        let local = spatial_feature(&fm, &mask, r, c, 5).unwrap();
        assert_eq!(sscc.map.label(r, c) as usize, scc_classify(&local, &centers));
        let (label, breakdown) = asscc_classify(&fm, &mask, &centers, r, c, &scales).unwrap();
        assert_eq!(asscc.map.label(r, c) as usize, label);
        let (pos, b) = with_votes.next().unwrap();
        assert_eq!(*pos, (r, c));
        assert_eq!(*b, breakdown);
    }
    assert!(with_votes.next().is_none());
}

/// Nearest class mean on the normalized spectra, as a reference classifier.
fn nearest_mean_oa(fx: &common::Fixture) -> f64 {
    let means: Vec<Vec<f64>> = fx
        .real
        .class_rows()
        .iter()
        .map(|rows| {
            fx.real
                .inputs
                .select(Axis(0), rows)
                .mean_axis(Axis(0))
                .unwrap()
                .to_vec()
        })
        .collect();
    let (mut hit, mut n) = (0usize, 0usize);
    for p in 0..fx.cube.num_pixels() {
        if fx.mask.roles()[p] != Role::Test {
            continue;
        }
        let x = fx.cube.spectrum(p);
        let best = (0..means.len())
            .min_by(|&a, &b| {
                let da: f64 = x.iter().zip(&means[a]).map(|(u, v)| (u - v).powi(2)).sum();
                let db: f64 = x.iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        hit += (best + 1 == fx.gt.labels()[p] as usize) as usize;
        n += 1;
    }
    hit as f64 / n as f64
}

#[test]
fn desk_training_matches_the_separable_reference() {
    let fx = common::fixture(1, 0.0);
    let reference = nearest_mean_oa(&fx);
    assert!(reference >= 0.99, "reference OA {reference}");
    let out = common::train(&fx, &common::desk_config(1, 0.01));
    let last = out.trace.last().unwrap();
    assert_eq!(last.iter, common::BATCHES);
    assert!(last.acc >= 0.99, "final batch accuracy {}", last.acc);
    let oa = common::test_oa(&fx, &out, &[ClassifierMode::Scc])[0];
    assert!(
        oa >= 0.99 && oa >= reference - 0.01,
        "SCC OA {oa}, reference {reference}"
    );
}
