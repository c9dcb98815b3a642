#![allow(dead_code)]

use hsic_core::classify::{classify_image, estimate_centers, extract_feature_map, ClassifierMode, ScaleSet};
use hsic_core::data::{apply_speckle, synth_cube, GroundTruth, HyperCube, SplitMask};
use hsic_core::metrics::{confusion, oa_aa_kappa};
use hsic_core::train::{
    make_virtual_samples, normalize_cube, split_train_test, train_model, Interval, NormalizationMode, SampleSet,
    TrainConfig, TrainOutcome,
};
use hsic_core::Role;

pub const SIDE: usize = 32;
pub const BANDS: usize = 8;
pub const CLASSES: usize = 3;
pub const SEPARATION: f64 = 6.0;
pub const REAL_PER_CLASS: usize = 200;
pub const VIRTUAL_PER_CLASS: usize = 2000;
pub const BATCHES: usize = 2000;
pub const SPECKLE: f64 = 0.5;
pub const SPECKLE_SEED: u64 = 99;

/// Small-batch settings that leave the initial plateau within the desk budget.
pub fn desk_config(seed: u64, lambda: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        lr0: 0.1,
        max_batches: BATCHES,
        lambda,
        seed,
        ..TrainConfig::default()
    }
}

pub struct Fixture {
    pub cube: HyperCube,
    pub gt: GroundTruth,
    pub mask: SplitMask,
    pub real: SampleSet,
    pub training: SampleSet,
}

pub fn fixture(seed: u64, speckle: f64) -> Fixture {
    let (cube, gt) = synth_cube(CLASSES, SIDE, SIDE, BANDS, SEPARATION, seed).unwrap();
    let cube = if speckle > 0.0 {
        apply_speckle(&cube, speckle, SPECKLE_SEED)
    } else {
        cube
    };
    let (cube, _) = normalize_cube(&cube, NormalizationMode::PerBand).unwrap();
    let mask = split_train_test(&gt, REAL_PER_CLASS, seed).unwrap();
    let real = SampleSet::from_mask(&cube, &gt, &mask, Role::Train).unwrap();
    let virt = make_virtual_samples(&real, VIRTUAL_PER_CLASS, Interval::new(-1.0, 2.0).unwrap(), seed).unwrap();
    let training = real.concat(&virt).unwrap();
    Fixture {
        cube,
        gt,
        mask,
        real,
        training,
    }
}

pub fn train(fx: &Fixture, config: &TrainConfig) -> TrainOutcome {
    train_model(&fx.training, config).unwrap()
}

/// Overall accuracy on the Test pixels for each mode.
pub fn test_oa(fx: &Fixture, outcome: &TrainOutcome, modes: &[ClassifierMode]) -> Vec<f64> {
    let fm = extract_feature_map(&outcome.network, &fx.cube).unwrap();
    let centers = estimate_centers(&outcome.network, &fx.real).unwrap();
    modes
        .iter()
        .map(|mode| {
            let pred = classify_image(&fm, &fx.mask, &centers, mode).unwrap();
            oa_aa_kappa(&confusion(&pred.map, &fx.gt, &fx.mask).unwrap())
                .unwrap()
                .oa
        })
        .collect()
}

pub fn scc_and_asscc() -> [ClassifierMode; 2] {
    [ClassifierMode::Scc, ClassifierMode::Asscc(ScaleSet::default())]
}
