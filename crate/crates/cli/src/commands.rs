use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hsic_core::classify::{
    classify_image, extract_feature_map, votes_to_csv, ClassifierMode, EstimatedCenters, ScaleSet,
};
use hsic_core::data::{self, GroundTruth, Role};
use hsic_core::metrics::{confusion, oa_aa_kappa, scores_to_csv};
use hsic_core::train::{
    make_virtual_samples, normalize_cube, split_train_test, train_model, NormalizationStats, SampleSet, TrainConfig,
};
use hsic_core::Network;
use log::info;

use crate::manifest::{FileDigest, NormalizationRecord, RunManifest};
use crate::palette::{render, Palette};
use crate::{
    ClassifyArgs, CliError, ConvertArgs, EvaluateArgs, ExportArgs, ExtractArgs, NormalizeArgs, SplitArgs, SynthArgs,
    TrainArgs,
};

pub const NETWORK_FILE: &str = "network.bin";
pub const CENTERS_FILE: &str = "centers.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const MASK_FILE: &str = "mask.bin";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let (cube, gt) = data::synth_cube(a.classes, a.height, a.width, a.bands, a.separation, a.seed)?;
    let cube = if a.speckle > 0.0 {
        data::apply_speckle(&cube, a.speckle, a.seed.wrapping_add(1))
    } else {
        cube
    };
    create_dir(&a.out)?;
    data::save_cube(&cube, &a.out.join("cube.bin"))?;
    data::save_groundtruth(&gt, &a.out.join("gt.bin"))?;
    info!(
        "wrote {}x{}x{} scene with {} classes to {}",
        a.height,
        a.width,
        a.bands,
        a.classes,
        a.out.display()
    );
    Ok(())
}

pub fn convert(a: &ConvertArgs) -> Result<(), CliError> {
    let raw = fs::read(&a.raw).map_err(|e| CliError::io(&a.raw, e))?;
    let cube = data::cube_from_raw(&raw, a.height, a.width, a.bands, a.dtype.into(), a.interleave.into())?;
    data::save_cube(&cube, &a.out)?;
    if let (Some(labels), Some(gt_out)) = (&a.labels, &a.gt_out) {
        let bytes = fs::read(labels).map_err(|e| CliError::io(labels, e))?;
        if bytes.len() != a.height * a.width * 2 {
            return Err(CliError::Data(format!(
                "{}: expected {} bytes of u16 labels, found {}",
                labels.display(),
                a.height * a.width * 2,
                bytes.len()
            )));
        }
        let values: Vec<u16> = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let k = values.iter().copied().max().unwrap_or(0) as usize;
        let gt = match &a.class_names {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let names: Vec<String> = text.lines().map(str::to_string).collect();
                GroundTruth::new(a.height, a.width, values, names)?
            }
            None => GroundTruth::with_default_names(a.height, a.width, values, k)?,
        };
        data::save_groundtruth(&gt, gt_out)?;
    }
    Ok(())
}

pub fn normalize(a: &NormalizeArgs) -> Result<(), CliError> {
    let cube = data::load_cube(&a.cube)?;
    let (out, _) = normalize_cube(&cube, a.normalization.into())?;
    data::save_cube(&out, &a.out)?;
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result<(), CliError> {
    let gt = data::load_groundtruth(&a.gt)?;
    let mask = split_train_test(&gt, a.per_class, a.seed)?;
    data::save_mask(&mask, &a.out)?;
    info!(
        "{} train, {} test pixels",
        mask.count(Role::Train),
        mask.count(Role::Test)
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            TrainConfig::from_kv_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
        None => Ok(TrainConfig::default()),
    }
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let cube = data::load_cube(&a.cube)?;
    let gt = data::load_groundtruth(&a.gt)?;
    let (cube, stats) = normalize_cube(&cube, config.normalization)?;
    create_dir(&a.out)?;

    let mut inputs = vec![FileDigest::of(&a.cube)?, FileDigest::of(&a.gt)?];
    let mut outputs = Vec::new();
    let mask = match &a.mask {
        Some(path) => {
            let mask = data::load_mask(path)?;
            inputs.push(FileDigest::of(path)?);
            mask
        }
        None => {
            let mask = split_train_test(&gt, config.real_per_class, config.seed)?;
            data::save_mask(&mask, &a.out.join(MASK_FILE))?;
            outputs.push(MASK_FILE);
            mask
        }
    };
    mask.check_against(&gt)?;
    let real = SampleSet::from_mask(&cube, &gt, &mask, Role::Train)?;
    let virt = make_virtual_samples(&real, config.virtual_per_class, config.q_range, config.seed)?;
    let samples = real.concat(&virt)?;
    let prep_secs = start.elapsed().as_secs_f64();
    info!(
        "training on {} real + {} virtual samples for {} batches",
        real.len(),
        virt.len(),
        config.max_batches
    );

    let train_start = Instant::now();
    let outcome = match train_model(&samples, &config) {
        Ok(o) => o,
        Err(hsic_core::Error::Diverged { batch, trace }) => {
            write_text(&a.out.join(TRACE_FILE), &trace.to_csv())?;
            return Err(CliError::Diverged(format!(
                "training diverged at batch {batch}; partial trace in {}",
                a.out.join(TRACE_FILE).display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let train_secs = train_start.elapsed().as_secs_f64();

    outcome.network.save(&a.out.join(NETWORK_FILE))?;
    outcome.centers.save(&a.out.join(CENTERS_FILE))?;
    write_text(&a.out.join(TRACE_FILE), &outcome.trace.to_csv())?;
    outputs.extend([NETWORK_FILE, CENTERS_FILE, TRACE_FILE]);
    if let Some(last) = outcome.trace.last() {
        info!(
            "batch {}: L_S {:.4} L_C {:.4} acc {:.3} ratio {:.4}",
            last.iter, last.ls, last.lc, last.acc, last.ratio
        );
    }

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.to_kv_string(),
        seeds: BTreeMap::from([
            ("init".to_string(), config.seed),
            ("split".to_string(), config.seed),
            ("virtual".to_string(), config.seed),
            ("batches".to_string(), config.seed),
        ]),
        normalization: NormalizationRecord {
            mode: stats.mode.to_string(),
            means: stats.means,
            stds: stats.stds,
        },
        inputs,
        outputs: outputs
            .iter()
            .map(|name| {
                Ok(FileDigest {
                    path: name.into(),
                    sha256: crate::manifest::sha256_file(&a.out.join(name))?,
                })
            })
            .collect::<Result<_, CliError>>()?,
        timings_secs: BTreeMap::from([
            ("prepare".to_string(), prep_secs),
            ("train".to_string(), train_secs),
            ("total".to_string(), start.elapsed().as_secs_f64()),
        ]),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    manifest.save(&a.out)?;
    info!("run written to {}", a.out.display());
    Ok(())
}

pub fn extract(a: &ExtractArgs) -> Result<(), CliError> {
    let manifest = RunManifest::load(&a.run)?;
    manifest.verify_outputs(&a.run)?;
    let network = Network::load(&a.run.join(NETWORK_FILE))?;
    let stats = NormalizationStats {
        mode: manifest
            .normalization
            .mode
            .parse()
            .map_err(|e: hsic_core::Error| CliError::Data(e.to_string()))?,
        means: manifest.normalization.means.clone(),
        stds: manifest.normalization.stds.clone(),
    };
    let cube = stats.apply(&data::load_cube(&a.cube)?)?;
    let fm = extract_feature_map(&network, &cube)?;
    data::save_feature_map(&fm, &a.out)?;
    Ok(())
}

fn parse_mode(mode: &str, scales: Option<&str>) -> Result<ClassifierMode, CliError> {
    let mode: ClassifierMode = mode.parse()?;
    match (mode, scales) {
        (mode, None) => Ok(mode),
        (ClassifierMode::Asscc(_), Some(s)) => Ok(ClassifierMode::Asscc(s.parse::<ScaleSet>()?)),
        (_, Some(_)) => Err(CliError::Usage("--scales applies to --mode asscc only".into())),
    }
}

pub fn classify(a: &ClassifyArgs) -> Result<(), CliError> {
    let mode = parse_mode(&a.mode, a.scales.as_deref())?;
    if a.dump_votes.is_some() && !matches!(mode, ClassifierMode::Asscc(_)) {
        return Err(CliError::Usage("--dump-votes applies to --mode asscc only".into()));
    }
    let fm = data::load_feature_map(&a.features)?;
    let gt = data::load_groundtruth(&a.gt)?;
    let mask = data::load_mask(&a.mask)?;
    mask.check_against(&gt)?;
    let centers = EstimatedCenters::from_feature_map(&fm, &gt, &mask)?;
    let result = classify_image(&fm, &mask, &centers, &mode)?;
    data::save_prediction(&result.map, &a.out)?;
    if let Some(path) = &a.dump_votes {
        write_text(path, &votes_to_csv(&result.votes))?;
    }
    info!("labeled {} test pixels", mask.count(Role::Test));
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let pred = data::load_prediction(&a.pred)?;
    let gt = data::load_groundtruth(&a.gt)?;
    let mask = data::load_mask(&a.mask)?;
    mask.check_against(&gt)?;
    if mask.count(Role::Test) == 0 {
        return Err(CliError::Data(format!(
            "{} has no Test pixels; training pixels are never scored",
            a.mask.display()
        )));
    }
    let scores = oa_aa_kappa(&confusion(&pred, &gt, &mask)?)?;
    let csv = scores_to_csv(&scores, gt.class_names());
    match &a.out {
        Some(path) => {
            write_text(path, &csv)?;
            info!("OA {:.4} AA {:.4} kappa {:.4}", scores.oa, scores.aa, scores.kappa);
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn export_map(a: &ExportArgs) -> Result<(), CliError> {
    let (h, w, labels) = match (&a.pred, &a.gt) {
        (Some(p), _) => {
            let pred = data::load_prediction(p)?;
            (pred.height(), pred.width(), pred.labels().to_vec())
        }
        (None, Some(g)) => {
            let gt = data::load_groundtruth(g)?;
            (gt.height(), gt.width(), gt.labels().to_vec())
        }
        (None, None) => return Err(CliError::Usage("--pred or --gt is required".into())),
    };
    let palette = match &a.palette {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            Palette::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => Palette::default(),
    };
    let img = render(h, w, &labels, &palette)?;
    img.save_with_format(&a.out, image::ImageFormat::Png)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    Ok(())
}
